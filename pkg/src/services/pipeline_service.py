"""Content-addressed pipeline stages.

Every stage writes into ``<output_root>/<stage>-<hash12>`` where the hash
covers the settings the stage depends on, its seed and the hashes of its
inputs. A stage whose ``manifest.json`` already exists is skipped unless
forced, so re-running an unchanged command does nothing.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from src.core.config import Settings, config_hash, derive_settings, ensure_directories
from src.core.exceptions import ParameterError
from src.models.document import Document, DocumentKind
from src.models.records import AblationRecord, EvaluationReport
from src.models.relation import RelationKind
from src.nn.checkpoint import file_hash, load_checkpoint, save_checkpoint
from src.nn.encoder import DocumentEncoder
from src.nn.rcm import global_relation_distribution
from src.services.corpus_service import load_corpus
from src.services.eval_service import TASK_KINDS, Evaluator
from src.services.finetune_service import RelationFinetuner
from src.services.pretrain_service import RCMPretrainer, export_encoder
from src.services.synth_service import DocumentGenerator, split_corpus
from src.utils.logging import get_logger

logger = get_logger(__name__)

MANIFEST = "manifest.json"


class StageResult(BaseModel):
    stage: str
    directory: Path
    hash: str
    skipped: bool = False
    manifest: Dict[str, Any] = {}


def digest(*parts: Any) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def write_jsonl(path: Path, records: Iterable[BaseModel]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for record in records:
            handle.write(json.dumps(record.model_dump(mode="json"), sort_keys=True) + "\n")


def write_json(path: Path, payload: Dict[str, Any]) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")


class PipelineService:
    """Runs gen, pretrain, finetune, eval, dump-features and ablate."""

    def __init__(self, config: Settings, force: bool = False):
        self.config = config
        self.force = force
        self.root = ensure_directories(config)

    def _stage(self, name: str, stage_hash: str) -> StageResult:
        directory = self.root / f"{name}-{stage_hash[:12]}"
        manifest_path = directory / MANIFEST
        if manifest_path.is_file() and not self.force:
            logger.info(f"Stage {name} is up to date, skipping", directory=str(directory))
            manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
            return StageResult(stage=name, directory=directory, hash=stage_hash, skipped=True, manifest=manifest)
        directory.mkdir(parents=True, exist_ok=True)
        return StageResult(stage=name, directory=directory, hash=stage_hash)

    def _finish(self, result: StageResult, manifest: Dict[str, Any]) -> StageResult:
        manifest = {"stage": result.stage, "hash": result.hash, "seed": self.config.seed,
                    "config_hash": config_hash(self.config), **manifest}
        write_json(result.directory / MANIFEST, manifest)
        logger.info(f"Stage {result.stage} finished", directory=str(result.directory))
        return result.model_copy(update={"manifest": manifest})

    # corpus

    def gen(self, corpus_file: Optional[Path] = None) -> StageResult:
        """Generate the corpus, or register an existing corpus file."""
        if corpus_file is not None:
            corpus_file = Path(corpus_file)
            load_corpus(corpus_file, self.config.corpus.max_tokens_per_entity)
            source_hash = file_hash(corpus_file)
            return StageResult(stage="gen", directory=corpus_file.parent, hash=source_hash,
                               manifest={"corpus": str(corpus_file), "corpus_hash": source_hash})
        corpus = self.config.corpus
        stage_hash = digest("gen", corpus.model_dump(mode="json"), self.config.model.n_cap,
                            self.config.model.max_seq_len, self.config.seed)
        result = self._stage("gen", stage_hash)
        if result.skipped:
            return result
        path = result.directory / "corpus.jsonl"
        mix = {DocumentKind.TABLE: corpus.tables, DocumentKind.FORM: corpus.forms,
               DocumentKind.PARAGRAPHS: corpus.paragraphs}
        documents = DocumentGenerator.from_settings(self.config).gen_corpus(mix, self.config.seed, self.config, path)
        return self._finish(result, {"corpus": str(path), "corpus_hash": file_hash(path), "documents": len(documents)})

    def split_key(self) -> Dict[str, float]:
        """The split fractions; downstream stage hashes include them since the corpus file does not."""
        corpus = self.config.corpus
        return {"train_fraction": corpus.train_fraction, "val_fraction": corpus.val_fraction}

    def documents(self, corpus: StageResult) -> Dict[str, List[Document]]:
        docs = load_corpus(corpus.manifest["corpus"], self.config.corpus.max_tokens_per_entity)
        return split_corpus(docs, self.config.corpus.train_fraction, self.config.corpus.val_fraction)

    # training

    def pretrain(self, corpus: StageResult) -> StageResult:
        pre = self.config.pretrain
        stage_hash = digest("pretrain", corpus.manifest["corpus_hash"], self.split_key(),
                            self.config.model.model_dump(mode="json"), pre.model_dump(mode="json"),
                            self.config.corpus.vocab_size, self.config.seed)
        result = self._stage("pretrain", stage_hash)
        if result.skipped:
            return result
        train = self.documents(corpus)["train"]
        trainer = RCMPretrainer(self.config)
        state, records = trainer.train(train)
        write_jsonl(result.directory / "steps.jsonl", records)
        metadata = {"tasks": pre.tasks, "seed": self.config.seed, "step": state.step}
        hashes = {
            "encoder": save_checkpoint(result.directory / "encoder.ckpt", export_encoder(state), metadata),
            "online": save_checkpoint(result.directory / "online.ckpt", state.online, metadata),
            "target": save_checkpoint(result.directory / "target.ckpt", state.target, metadata),
        }
        return self._finish(result, {"corpus": corpus.manifest["corpus"], "corpus_hash": corpus.manifest["corpus_hash"],
                                     "checkpoints": hashes, "steps": state.step})

    def finetune(self, corpus: StageResult, kind: RelationKind, checkpoint: Optional[Path] = None,
                 pretrained: Optional[StageResult] = None) -> StageResult:
        """Fine-tune one head on top of a pre-trained encoder (``online.ckpt`` of the pretrain stage by default)."""
        kind = RelationKind.parse(kind)
        if checkpoint is None:
            pretrained = pretrained or self.pretrain(corpus)
            checkpoint = pretrained.directory / "online.ckpt"
        checkpoint = Path(checkpoint)
        source_hash = file_hash(checkpoint)
        stage_hash = digest("finetune", kind.value, corpus.manifest["corpus_hash"], self.split_key(), source_hash,
                            self.config.finetune.model_dump(mode="json"), self.config.seed)
        result = self._stage(f"finetune-{kind.value}", stage_hash)
        if result.skipped:
            return result
        online, _ = load_checkpoint(checkpoint)
        finetuner = RelationFinetuner(self.config)
        params = finetuner.init_params(kind, online, pretrained=online)
        params, records = finetuner.train(self.documents(corpus)["train"], kind, params)
        write_jsonl(result.directory / "finetune.jsonl", records)
        head_hash = save_checkpoint(result.directory / "head.ckpt", params, {"kind": kind.value,
                                                                            "source": source_hash})
        return self._finish(result, {"kind": kind.value, "source_checkpoint": str(checkpoint),
                                     "source_hash": source_hash, "checkpoint_hash": head_hash})

    # evaluation

    def evaluate(self, corpus: StageResult, tasks: Sequence[DocumentKind], checkpoint: Optional[Path] = None,
                 split: str = "test") -> List[EvaluationReport]:
        """Fine-tune what is missing, then score every task and write one report per task."""
        pretrained = None if checkpoint is not None else self.pretrain(corpus)
        heads, hashes = {}, {}
        for task in tasks:
            for kind in TASK_KINDS[DocumentKind(task)]:
                if kind not in heads:
                    stage = self.finetune(corpus, kind, checkpoint, pretrained)
                    heads[kind], _ = load_checkpoint(stage.directory / "head.ckpt")
                    hashes[kind.value] = stage.manifest["checkpoint_hash"]
        stage_hash = digest("eval", corpus.manifest["corpus_hash"], self.split_key(), sorted(hashes.items()), split,
                            self.config.eval.model_dump(mode="json"), sorted(DocumentKind(t).value for t in tasks))
        result = self._stage("eval", stage_hash)
        if result.skipped:
            return [EvaluationReport.model_validate_json((result.directory / f"report-{DocumentKind(t).value}.json")
                                                         .read_text(encoding="utf-8")) for t in tasks]
        documents = self.documents(corpus)[split]
        evaluator = Evaluator(self.config)
        reports = []
        for task in tasks:
            task = DocumentKind(task)
            report = evaluator.evaluate(task, documents, heads,
                                        {k: v for k, v in hashes.items() if RelationKind(k) in TASK_KINDS[task]})
            (result.directory / f"report-{task.value}.json").write_text(
                json.dumps(report.model_dump(mode="json"), sort_keys=True, indent=2) + "\n", encoding="utf-8")
            reports.append(report)
        write_jsonl(result.directory / "metrics.jsonl", reports)
        self._finish(result, {"tasks": [DocumentKind(t).value for t in tasks], "split": split,
                              "checkpoint_hash": hashes})
        return reports

    def dump_features(self, corpus: StageResult, checkpoint: Optional[Path] = None, split: str = "test",
                      limit: Optional[int] = None) -> Path:
        """Write each document's entity features and global relation matrix to an ``.npz`` archive."""
        if checkpoint is None:
            checkpoint = self.pretrain(corpus).directory / "encoder.ckpt"
        checkpoint = Path(checkpoint)
        stage_hash = digest("features", corpus.manifest["corpus_hash"], self.split_key(), file_hash(checkpoint), split,
                            limit, self.config.model.model_dump(mode="json"), self.config.pretrain.tau_g)
        result = self._stage("features", stage_hash)
        path = result.directory / "features.npz"
        if result.skipped:
            return path
        params, _ = load_checkpoint(checkpoint)
        encoder = DocumentEncoder(self.config.model, self.config.corpus.vocab_size, self.config.corpus.patch_size)
        bound = params.bind(False)
        arrays = {}
        documents = self.documents(corpus)[split]
        for doc in documents[:limit] if limit else documents:
            features, _ = encoder.features(encoder.tokenize(doc), bound)
            arrays[f"{doc.doc_id}/m"] = features.m.value
            arrays[f"{doc.doc_id}/rg"] = global_relation_distribution(features.m, self.config.pretrain.tau_g).value
        np.savez(path, **arrays)
        self._finish(result, {"features": str(path), "documents": len(arrays) // 2})
        return path


def run_ablation(config: Settings, force: bool = False, corpus_file: Optional[Path] = None) -> List[AblationRecord]:
    """pretrain -> finetune -> eval for every ablation task set and seed."""
    if not config.eval.ablation_tasks or not config.eval.ablation_seeds:
        raise ParameterError("ablation needs at least one task set and one seed")
    records = []
    for tasks in config.eval.ablation_tasks:
        for seed in config.eval.ablation_seeds:
            run_config = derive_settings(config, {"seed": seed, "pretrain.tasks": tasks})
            pipeline = PipelineService(run_config, force=force)
            corpus = pipeline.gen(corpus_file)
            reports = pipeline.evaluate(corpus, list(DocumentKind))
            scores = {report.task: report.aggregate.get("mean", 0.0) for report in reports}
            records.append(AblationRecord(tasks=run_config.pretrain.tasks, seed=seed, scores=scores))
            logger.info(f"Ablation run {run_config.pretrain.tasks} seed {seed} finished", **scores)
    directory = Path(config.output_root) / f"ablate-{digest('ablate', config_hash(config))[:12]}"
    directory.mkdir(parents=True, exist_ok=True)
    write_jsonl(directory / "ablation.jsonl", records)
    return records


def summarize_ablation(records: Sequence[AblationRecord]) -> List[Dict[str, Any]]:
    """Mean and variance of every downstream score per task set."""
    rows = []
    for tasks in dict.fromkeys(r.tasks for r in records):
        group = [r for r in records if r.tasks == tasks]
        row: Dict[str, Any] = {"tasks": tasks, "runs": len(group)}
        for task in group[0].scores:
            values = np.array([r.scores[task] for r in group])
            row[f"{task}_mean"] = float(values.mean())
            row[f"{task}_var"] = float(values.var())
        rows.append(row)
    return rows
