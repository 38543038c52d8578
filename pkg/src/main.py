"""docrel-desk command line."""

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from src.core.config import Settings, config_hash, load_settings
from src.core.exceptions import ConfigError, RCMError
from src.models.document import DocumentKind
from src.models.relation import RelationKind
from src.services.pipeline_service import PipelineService, run_ablation, summarize_ablation
from src.utils.logging import bind_run_context, get_logger, setup_logging

logger = get_logger(__name__)

TASK_CHOICES = [kind.value for kind in DocumentKind]
KIND_CHOICES = [kind.value for kind in RelationKind]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="docrel", description="Relational consistency pre-training at desk scale")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML settings file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted settings override, e.g. pretrain.lr=0.01 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", type=Path, help="output root (default $RCM_OUTPUT_ROOT or ./runs)")
    common.add_argument("--corpus", type=Path, help="use this corpus file instead of generating one")
    common.add_argument("--force", action="store_true", help="re-run stages whose outputs already exist")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")

    pretrain = sub.add_parser("pretrain", parents=[common], help="relational consistency pre-training")
    pretrain.add_argument("--tasks", help="task set, e.g. mvlm+lrcm+grcm")

    finetune = sub.add_parser("finetune", parents=[common], help="fine-tune relation heads")
    finetune.add_argument("--tasks", help="pre-training task set of the encoder to start from")
    finetune.add_argument("--kind", choices=KIND_CHOICES, action="append", help="relation kind (repeatable)")
    finetune.add_argument("--checkpoint", type=Path, help="encoder checkpoint to start from")

    evaluate = sub.add_parser("eval", parents=[common], help="decode and score the downstream tasks")
    evaluate.add_argument("--tasks", help="pre-training task set of the encoder")
    evaluate.add_argument("--kind", choices=TASK_CHOICES, action="append", help="downstream task (repeatable)")
    evaluate.add_argument("--threshold", type=float, help="decision threshold in (0, 1)")
    evaluate.add_argument("--checkpoint", type=Path, help="encoder checkpoint to fine-tune from")
    evaluate.add_argument("--split", choices=["train", "val", "test"], default="test")

    dump = sub.add_parser("dump-features", parents=[common], help="write entity features and global relations")
    dump.add_argument("--tasks", help="pre-training task set of the encoder")
    dump.add_argument("--checkpoint", type=Path, help="encoder checkpoint")
    dump.add_argument("--split", choices=["train", "val", "test"], default="test")
    dump.add_argument("--limit", type=int, help="dump at most this many documents")

    ablate = sub.add_parser("ablate", parents=[common], help="pretrain/finetune/eval for every task set and seed")
    ablate.add_argument("--tasks", action="append", help="task set to include (repeatable)")
    return parser


def resolve_settings(args: argparse.Namespace) -> Settings:
    overrides: List[str] = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output_root={args.out}")
    tasks = getattr(args, "tasks", None)
    if isinstance(tasks, str):
        overrides.append(f"pretrain.tasks={tasks}")
    elif tasks:
        overrides.append(f"eval.ablation_tasks=[{', '.join(tasks)}]")
    if getattr(args, "threshold", None) is not None:
        overrides.append(f"eval.threshold={args.threshold}")
    return load_settings(args.config, overrides)


def print_table(rows: Sequence[dict]) -> None:
    """Plain fixed-width summary on stdout."""
    if not rows:
        print("(no results)")
        return
    columns = list(rows[0])
    cells = [[f"{row[c]:.4f}" if isinstance(row[c], float) else str(row[c]) for c in columns] for row in rows]
    widths = [max(len(c), *(len(line[i]) for line in cells)) for i, c in enumerate(columns)]
    print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
    for line in cells:
        print("  ".join(v.ljust(w) for v, w in zip(line, widths)))


def dispatch(args: argparse.Namespace, config: Settings) -> None:
    if args.command == "ablate":
        records = run_ablation(config, force=args.force, corpus_file=args.corpus)
        print_table(summarize_ablation(records))
        return

    pipeline = PipelineService(config, force=args.force)
    corpus = pipeline.gen(args.corpus)
    if args.command == "gen":
        print_table([{"stage": "gen", "corpus": corpus.manifest["corpus"], "hash": corpus.hash[:12]}])
    elif args.command == "pretrain":
        result = pipeline.pretrain(corpus)
        print_table([{"stage": "pretrain", "directory": str(result.directory), "steps": result.manifest.get("steps")}])
    elif args.command == "finetune":
        rows = []
        for kind in args.kind or config.finetune.kinds:
            result = pipeline.finetune(corpus, RelationKind.parse(kind), args.checkpoint)
            rows.append({"kind": kind, "directory": str(result.directory)})
        print_table(rows)
    elif args.command == "eval":
        tasks = [DocumentKind(task) for task in (args.kind or TASK_CHOICES)]
        reports = pipeline.evaluate(corpus, tasks, args.checkpoint, args.split)
        print_table([{"task": r.task, "metric": r.metric, **r.aggregate} for r in reports])
    elif args.command == "dump-features":
        path = pipeline.dump_features(corpus, args.checkpoint, args.split, args.limit)
        print_table([{"stage": "dump-features", "file": str(path)}])


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one subcommand and return the exit status."""
    args = build_parser().parse_args(argv)
    try:
        config = resolve_settings(args)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    setup_logging(config.app.log_level, config.app.log_file)
    bind_run_context(command=args.command, seed=config.seed, config_hash=config_hash(config)[:12])
    logger.info(f"Running {args.command}", output_root=str(config.output_root))
    try:
        dispatch(args, config)
    except ConfigError as e:
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (RCMError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
