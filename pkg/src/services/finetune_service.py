"""Relation head fine-tuning and prediction."""

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.core import autodiff as ad
from src.core.config import Settings
from src.core.exceptions import LabelError, NonFiniteLossError, ParameterError
from src.core.rng import numpy_generator
from src.models.document import Document
from src.models.records import FinetuneRecord
from src.models.relation import RelationKind, RelationMatrix
from src.nn.encoder import DocumentEncoder
from src.nn.optim import Optimizer, build_optimizer, clip_gradients
from src.nn.parameters import Bound, ParameterBuilder, ParameterSet, gradients_of
from src.nn.relhead import head_prefix, init_relation_head, relation_logits, relation_scores
from src.services.corpus_service import check_token_budget, gt_relation_matrix, labelled_kinds
from src.utils.logging import get_logger

logger = get_logger(__name__)


def pair_weights(targets: np.ndarray, valid: np.ndarray, reweight: bool) -> np.ndarray:
    """Weight 1 per valid pair, positives scaled by n_neg / n_pos when reweighting."""
    weights = valid.astype(np.float64)
    if reweight:
        positives = int(np.sum(targets[valid] > 0.5))
        negatives = int(np.sum(valid)) - positives
        if positives and negatives:
            weights = np.where(valid & (targets > 0.5), negatives / positives, weights)
    return weights


class RelationFinetuner:
    """Fine-tunes the encoder jointly with one relation head per kind."""

    def __init__(self, config: Settings):
        self.config = config
        self.encoder = DocumentEncoder(config.model, config.corpus.vocab_size, config.corpus.patch_size)

    def init_params(
        self,
        kind: Union[RelationKind, str],
        encoder_params: ParameterSet,
        pretrained: Optional[ParameterSet] = None,
        seed: Optional[int] = None,
    ) -> ParameterSet:
        """Encoder weights plus a fresh head; the head's aggregator copies the LRCM one when asked."""
        kind = RelationKind.parse(kind)
        seed = self.config.seed if seed is None else seed
        model = self.config.model
        builder = ParameterBuilder(numpy_generator(seed, "relhead", kind.value), model.init_scale)
        use_pretrained = pretrained if self.config.finetune.init_aggregator == "pretrained" else None
        init_relation_head(builder, kind, model.hidden, model.d_local, use_pretrained)
        return encoder_params.subset([f"{DocumentEncoder.prefix}."]).merge(builder.build())

    def logits(self, doc: Document, p: Bound, kind: RelationKind):
        features, _ = self.encoder.features(self.encoder.tokenize(doc), p)
        return relation_logits(features.m, p, kind)

    def batch_loss(
        self, batch: Sequence[Document], gt: Sequence[RelationMatrix], p: Bound, kind: RelationKind
    ) -> ad.Node:
        """Weighted BCE over every off-diagonal pair of the batch."""
        if len(batch) != len(gt):
            raise ParameterError(f"{len(batch)} documents but {len(gt)} label matrices")
        logits, targets, valid = [], [], []
        for doc, matrix in zip(batch, gt):
            name = doc.doc_id or "<unnamed>"
            if matrix.kind != kind:
                raise LabelError(f"{name}: {matrix.kind.value} labels given to the {kind.value} head")
            if matrix.n != doc.n_entities:
                raise LabelError(f"{name}: label matrix of size {matrix.n} for {doc.n_entities} entities")
            logits.append(ad.reshape(self.logits(doc, p, kind), (-1,)))
            targets.append(matrix.decisions.reshape(-1).astype(np.float64))
            valid.append(~np.eye(doc.n_entities, dtype=bool).reshape(-1))
        targets_all = np.concatenate(targets)
        valid_all = np.concatenate(valid)
        weights = pair_weights(targets_all, valid_all, self.config.finetune.reweight_positives)
        return ad.bce_with_logits(ad.concat(logits, axis=0), targets_all, weights)

    def finetune_step(
        self,
        batch: Sequence[Document],
        gt: Sequence[RelationMatrix],
        params: ParameterSet,
        kind: Union[RelationKind, str],
        optimizer: Optimizer,
    ) -> Tuple[ParameterSet, float, float, float]:
        """One BCE update of encoder and head; returns (params, loss, grad_norm, lr)."""
        kind = RelationKind.parse(kind)
        p = params.bind(True)
        loss = self.batch_loss(batch, gt, p, kind)
        if not np.isfinite(loss.value):
            raise NonFiniteLossError("fine-tuning loss is not finite", [doc.doc_id for doc in batch])
        ad.backward(loss)
        grads, norm = clip_gradients(gradients_of(p), self.config.finetune.grad_clip)
        lr = optimizer.step(params, grads)
        return params, float(loss.value), norm, lr

    def train(
        self,
        documents: Sequence[Document],
        kind: Union[RelationKind, str],
        params: ParameterSet,
        epochs: Optional[int] = None,
        on_record: Optional[Callable[[FinetuneRecord], None]] = None,
    ) -> Tuple[ParameterSet, List[FinetuneRecord]]:
        """Epochs of shuffled batches over the documents labelled for ``kind``."""
        kind = RelationKind.parse(kind)
        ft = self.config.finetune
        epochs = ft.epochs if epochs is None else epochs
        labelled = [doc for doc in documents if kind in labelled_kinds(doc)]
        for doc in labelled:
            check_token_budget(doc, self.config.corpus.max_tokens_per_entity)
        if not labelled:
            raise LabelError(f"no training document carries {kind.value} labels")
        gt = [gt_relation_matrix(doc, kind) for doc in labelled]
        batch_size = min(ft.batch_size, len(labelled))
        batches_per_epoch = -(-len(labelled) // batch_size)
        optimizer = build_optimizer(ft, epochs * batches_per_epoch)
        records: List[FinetuneRecord] = []
        logger.info(f"Fine-tuning the {kind.value} head for {epochs} epochs on {len(labelled)} documents")
        step = 0
        for epoch in range(epochs):
            order = numpy_generator(self.config.seed, "finetune", kind.value, epoch).permutation(len(labelled))
            losses = []
            for start in range(0, len(order), batch_size):
                chosen = order[start : start + batch_size]
                params, loss, norm, lr = self.finetune_step(
                    [labelled[i] for i in chosen], [gt[i] for i in chosen], params, kind, optimizer
                )
                step += 1
                losses.append(loss)
                record = FinetuneRecord(kind=kind.value, epoch=epoch, step=step, loss=loss, grad_norm=norm, lr=lr)
                records.append(record)
                if on_record is not None:
                    on_record(record)
            logger.info(f"{kind.value} epoch {epoch + 1}/{epochs}", mean_loss=float(np.mean(losses)))
        return params, records

    def predict_relation_matrix(
        self, doc: Document, params: ParameterSet, kind: Union[RelationKind, str], threshold: Optional[float] = None
    ) -> RelationMatrix:
        kind = RelationKind.parse(kind)
        threshold = self.config.eval.threshold if threshold is None else threshold
        if not 0.0 < threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {threshold}")
        if f"{head_prefix(kind)}.classifier.fc1.weight" not in params:
            raise ParameterError(f"no {kind.value} head in the given parameters")
        p = params.bind(False)
        features, _ = self.encoder.features(self.encoder.tokenize(doc), p)
        scores = relation_scores(features.m, p, kind)
        return RelationMatrix.from_scores(kind, scores, threshold)
