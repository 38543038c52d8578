"""Downstream evaluation reports."""

from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from src.core.config import Settings, config_hash
from src.core.exceptions import ParameterError
from src.models.document import Document, DocumentKind
from src.models.records import DocumentScore, EvaluationReport
from src.models.relation import RelationKind
from src.nn.parameters import ParameterSet
from src.services.corpus_service import gt_relation_matrix
from src.services.decode_service import (
    bleu,
    decode_groups,
    decode_kv,
    decode_reading_order,
    group_f1,
    groups_to_matrix,
    heuristic_order,
    links_to_matrix,
    pairwise_f1,
    table_f1,
)
from src.services.finetune_service import RelationFinetuner
from src.utils.logging import get_logger

logger = get_logger(__name__)

TASK_KINDS = {
    DocumentKind.TABLE: (RelationKind.ROW, RelationKind.COL),
    DocumentKind.FORM: (RelationKind.KV,),
    DocumentKind.PARAGRAPHS: (RelationKind.ORDER,),
}
TASK_METRICS = {DocumentKind.TABLE: "table_f1", DocumentKind.FORM: "pairwise_f1", DocumentKind.PARAGRAPHS: "bleu"}


class Evaluator:
    """Scores fine-tuned heads on the documents of one task."""

    def __init__(self, config: Settings):
        self.config = config
        self.finetuner = RelationFinetuner(config)

    def score_document(self, doc: Document, heads: Mapping[RelationKind, ParameterSet], threshold: float) -> DocumentScore:
        predict = self.finetuner.predict_relation_matrix
        if doc.kind == DocumentKind.TABLE:
            pred_row = predict(doc, heads[RelationKind.ROW], RelationKind.ROW, threshold)
            pred_col = predict(doc, heads[RelationKind.COL], RelationKind.COL, threshold)
            gt_row = gt_relation_matrix(doc, RelationKind.ROW)
            gt_col = gt_relation_matrix(doc, RelationKind.COL)
            fixed_row = groups_to_matrix(RelationKind.ROW, decode_groups(pred_row), doc.n_entities)
            fixed_col = groups_to_matrix(RelationKind.COL, decode_groups(pred_col), doc.n_entities)
            return DocumentScore(
                doc_id=doc.doc_id,
                score=table_f1(pred_row, pred_col, gt_row, gt_col),
                extra={
                    "row_f1": group_f1(pred_row, gt_row),
                    "col_f1": group_f1(pred_col, gt_col),
                    "grouped_f1": table_f1(fixed_row, fixed_col, gt_row, gt_col),
                },
            )
        if doc.kind == DocumentKind.FORM:
            pred = predict(doc, heads[RelationKind.KV], RelationKind.KV, threshold)
            gt = gt_relation_matrix(doc, RelationKind.KV)
            decoded = links_to_matrix(decode_kv(pred, doc), doc.n_entities)
            return DocumentScore(
                doc_id=doc.doc_id, score=pairwise_f1(pred, gt), extra={"decoded_f1": pairwise_f1(decoded, gt)}
            )
        pred = predict(doc, heads[RelationKind.ORDER], RelationKind.ORDER, threshold)
        reference = list(doc.labels.reading_order)
        max_n = self.config.eval.bleu_max_n
        return DocumentScore(
            doc_id=doc.doc_id,
            score=bleu(decode_reading_order(pred), reference, max_n),
            extra={"heuristic_bleu": bleu(heuristic_order(doc), reference, max_n)},
        )

    def evaluate(
        self,
        task: DocumentKind,
        documents: Sequence[Document],
        heads: Mapping[RelationKind, ParameterSet],
        checkpoint_hash: Optional[Mapping[str, str]] = None,
        threshold: Optional[float] = None,
    ) -> EvaluationReport:
        task = DocumentKind(task)
        threshold = self.config.eval.threshold if threshold is None else threshold
        missing = [kind.value for kind in TASK_KINDS[task] if kind not in heads]
        if missing:
            raise ParameterError(f"evaluating {task.value} needs heads for {missing}")
        scores = [self.score_document(doc, heads, threshold) for doc in documents if doc.kind == task]
        aggregate: Dict[str, float] = {}
        if scores:
            aggregate["mean"] = float(np.mean([s.score for s in scores]))
            for name in scores[0].extra:
                aggregate[name] = float(np.mean([s.extra[name] for s in scores]))
        aggregate["documents"] = float(len(scores))
        logger.info(f"Evaluated {task.value}", **aggregate)
        return EvaluationReport(
            task=task.value,
            metric=TASK_METRICS[task],
            threshold=threshold,
            documents=scores,
            aggregate=aggregate,
            config_hash=config_hash(self.config),
            checkpoint_hash=dict(checkpoint_hash or {}),
        )
