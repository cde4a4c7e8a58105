"""Command-line entry point: one subcommand per pipeline stage.

Usage and configuration problems exit with status 2, runtime failures with 1; both
print a single ``error: <Kind>: <message>`` line to stderr.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from core.config import (
    CorpusParams,
    EvalParams,
    GridSpec,
    ModelConfig,
    Overlength,
    RunConfig,
    TokenizerParams,
    TrainSchedule,
    dump_run_config,
    load_run_config,
    merge_params,
    parse_run_config,
)
from core.errors import ConfigurationError, PipelineError, UsageError
from core.utils import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class ArgumentParser(argparse.ArgumentParser):
    "argparse that reports problems as UsageError instead of exiting"

    def error(self, message: str):
        raise UsageError(message)


def _common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", type=Path, help="YAML run configuration; flags override its values")
    parser.add_argument("--seed", type=int, help="Random seed for the stage")
    parser.add_argument("--out", type=Path, required=out_required, help="Output location")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="sindbert", description="Turkish RoBERTa pretraining and evaluation pipeline")
    parser.add_argument("--log-level", default="INFO", help="Logging level (default: INFO)")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    stages = parser.add_subparsers(dest="stage", required=True, parser_class=ArgumentParser)

    corpus = stages.add_parser("corpus", help="Filter, split and shard raw JSONL inputs")
    _common(corpus)
    corpus.add_argument("--input", type=Path, nargs="+", required=True, help="Raw newline-delimited JSON files")
    corpus.add_argument("--shard-bytes", type=int)
    corpus.add_argument("--valid-fraction", type=float)
    corpus.add_argument("--workers", type=int)

    tokenizer = stages.add_parser("tokenizer", help="Train a byte-level BPE vocabulary")
    _common(tokenizer)
    tokenizer.add_argument("--data", type=Path, required=True, help="Training corpus manifest")
    tokenizer.add_argument("--vocab-size", type=int)
    tokenizer.add_argument("--sample-bytes", type=int, help="Bytes to sample for training (default: whole corpus)")
    tokenizer.add_argument("--workers", type=int, default=1)

    pretrain = stages.add_parser("pretrain", help="Masked-LM pretraining")
    _common(pretrain)
    pretrain.add_argument("--data", type=Path, required=True, help="Training corpus manifest")
    pretrain.add_argument("--valid", type=Path, required=True, help="Validation corpus manifest")
    pretrain.add_argument("--tokenizer", type=Path, help="Tokenizer directory")
    pretrain.add_argument("--model-preset", choices=["base", "large", "toy"])
    pretrain.add_argument("--schedule-preset", choices=["base", "large", "desk"])
    pretrain.add_argument("--total-updates", type=int)
    pretrain.add_argument("--warmup-updates", type=int)
    pretrain.add_argument("--resume", type=Path, help="Checkpoint to continue from")
    pretrain.add_argument("--device", default="cpu")
    pretrain.add_argument("--name", help="Model name used in reports (default: output directory name)")

    finetune = stages.add_parser("finetune", help="Grid-search fine-tuning on a downstream task")
    _common(finetune)
    finetune.add_argument("--task", choices=["pos", "ner", "offense"], required=True)
    finetune.add_argument("--ckpt", type=Path, required=True, help="Pretrained checkpoint")
    finetune.add_argument("--tokenizer", type=Path, help="Tokenizer directory")
    finetune.add_argument("--data", type=Path, required=True, help="Task data directory")
    finetune.add_argument("--grid", type=Path, help="YAML grid specification")
    finetune.add_argument("--grid-preset", choices=["base", "large"])
    finetune.add_argument("--batch-sizes", type=int, nargs="+")
    finetune.add_argument("--learning-rates", type=float, nargs="+")
    finetune.add_argument("--max-epochs", type=int)
    finetune.add_argument("--patience", type=int)
    finetune.add_argument("--workers", type=int)
    finetune.add_argument("--device", default="cpu")
    finetune.add_argument("--name", help="Model name used in reports")

    evaluation = stages.add_parser("eval", help="Score minimal pairs or prediction files")
    protocols = evaluation.add_subparsers(dest="protocol", required=True, parser_class=ArgumentParser)
    turblimp = protocols.add_parser("turblimp", help="Minimal-pair accuracy by pseudo-log-likelihood")
    _common(turblimp)
    turblimp.add_argument("--ckpt", type=Path, required=True)
    turblimp.add_argument("--tokenizer", type=Path)
    turblimp.add_argument("--pairs", type=Path, required=True)
    turblimp.add_argument("--length-normalize", action="store_true", default=None)
    turblimp.add_argument("--overlength", choices=[o.value for o in Overlength])
    turblimp.add_argument("--batch-size", type=int)
    turblimp.add_argument("--device", default="cpu")
    turblimp.add_argument("--name", help="Model name used in reports")
    metrics = protocols.add_parser("metrics", help="Score a prediction file against gold")
    _common(metrics)
    metrics.add_argument("--task", choices=["pos", "ner", "offense"], required=True)
    metrics.add_argument("--gold", type=Path, required=True)
    metrics.add_argument("--pred", type=Path, required=True)
    metrics.add_argument("--name", help="Model name used in reports")

    report = stages.add_parser("report", help="Aggregate run manifests into tables and curves")
    _common(report)
    report.add_argument("--runs", type=Path, nargs="+", required=True, help="Run directories")

    synth = stages.add_parser("synth", help="Write deterministic toy corpora, tasks and minimal pairs")
    _common(synth)
    synth.add_argument("--docs", type=int, default=2000)
    synth.add_argument("--sentences", type=int, default=200)
    synth.add_argument("--pairs", type=int, default=50)

    serve = stages.add_parser("serve", help="Serve tokenizer and scoring endpoints")
    serve.add_argument("--ckpt", type=Path)
    serve.add_argument("--tokenizer", type=Path)
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=5003)
    return parser


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise UsageError(f"Missing {what}")
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


def resolve_config(args: argparse.Namespace) -> RunConfig:
    "File values first, then every flag that was given"
    config = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
    raw = dump_run_config(config)
    raw["stage"] = args.stage
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        raw["out"] = str(args.out)
    return parse_run_config(raw, source=str(args.config or "<flags>"))


def _path_from(args: argparse.Namespace, config: RunConfig, key: str) -> Optional[Path]:
    value = getattr(args, key, None)
    return value if value is not None else config.paths.get(key)


def _seed(config: RunConfig, default: int = 1) -> int:
    return config.seed if config.seed is not None else default


def run_corpus(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.corpus import prepare_corpus

    inputs = [_require(p, "input") for p in args.input]
    params = merge_params(
        CorpusParams, config.corpus,
        shard_bytes=args.shard_bytes, valid_fraction=args.valid_fraction, workers=args.workers, seed=config.seed,
    )
    train, valid = prepare_corpus(inputs, args.out, params.shard_bytes, params.valid_fraction, params.seed, params.workers)
    return {
        "train_documents": train.documents,
        "valid_documents": valid.documents,
        "total_bytes": train.total_bytes + valid.total_bytes,
        "dropped_invalid_encoding": train.filter_stats.dropped_invalid_encoding,
        "source_bytes": train.source_bytes,
        "params": params.model_dump(mode="json"),
    }


def run_tokenizer(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.bpe import train_vocab
    from core.corpus import load_manifest, read_shards, sample_for_vocab

    manifest = load_manifest(_require(args.data, "corpus manifest"))
    params = merge_params(
        TokenizerParams, config.tokenizer,
        vocab_size=args.vocab_size, sample_bytes=args.sample_bytes, seed=config.seed,
    )
    if params.sample_bytes:
        sample = sample_for_vocab(manifest, params.sample_bytes, params.seed)
    else:
        sample = read_shards(manifest)
    vocab = train_vocab(sample, params.vocab_size, workers=args.workers, show_progress=not args.quiet)
    vocab.save(args.out)
    return {"vocab_size": len(vocab), "merges": len(vocab.merges), "params": params.model_dump(mode="json")}


def _load_vocab(args: argparse.Namespace, config: RunConfig):
    from core.bpe import BpeVocab

    return BpeVocab.load(_require(_path_from(args, config, "tokenizer"), "tokenizer directory"))


def run_pretrain(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.corpus import load_manifest
    from core.encoder.model import count_parameters
    from core.pretrain import train

    vocab = _load_vocab(args, config)
    train_manifest = load_manifest(_require(args.data, "training manifest"))
    valid_manifest = load_manifest(_require(args.valid, "validation manifest"))
    if args.resume is not None:
        _require(args.resume, "resume checkpoint")

    if args.model_preset:
        model = ModelConfig.preset(args.model_preset, vocab_size=len(vocab))
    elif config.model:
        model = config.model
    else:
        model = ModelConfig.preset("toy", vocab_size=len(vocab))
    base = TrainSchedule.preset(args.schedule_preset) if args.schedule_preset else (config.schedule or TrainSchedule.preset("desk"))
    schedule = merge_params(
        TrainSchedule, base, total_updates=args.total_updates, warmup_updates=args.warmup_updates, seed=config.seed
    )

    checkpoint, log = train(
        model, schedule, train_manifest, valid_manifest, vocab, args.out,
        resume=args.resume, device=args.device, show_progress=not args.quiet,
    )
    return {
        "vocab_size": len(vocab),
        "parameters": count_parameters(model),
        "final_step": checkpoint.step,
        "initial_valid_perplexity": log.valid_points[0][1],
        "final_valid_perplexity": log.valid_points[-1][1],
        "model": model.model_dump(mode="json"),
        "schedule": schedule.model_dump(mode="json"),
    }


def run_finetune(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.encoder.checkpoint import load_checkpoint
    from core.finetune import prepare_task, run_grid, task_from_preset, trials_table
    from core.report import write_csv

    vocab = _load_vocab(args, config)
    checkpoint = load_checkpoint(_require(args.ckpt, "checkpoint"))
    checkpoint.config.check_tokenizer(len(vocab))
    task, files = task_from_preset(args.task, _require(args.data, "task data directory"))

    if args.grid is not None:
        grid_file = load_run_config(_require(args.grid, "grid file"))
        base = grid_file.grid or GridSpec()
    elif args.grid_preset:
        base = GridSpec.preset(args.grid_preset)
    else:
        base = config.grid or GridSpec()
    grid = merge_params(
        GridSpec, base,
        batch_sizes=args.batch_sizes, learning_rates=args.learning_rates, max_epochs=args.max_epochs,
        patience=args.patience, workers=args.workers, seed=config.seed,
    )

    data = prepare_task(vocab, task, files, checkpoint.config.max_positions, grid.seed)
    result = run_grid(checkpoint, data, grid, out_dir=args.out, device=args.device)
    write_csv(trials_table(result), args.out / "trials.csv")
    return {
        "task": task.name,
        "test_score": result.best.test_score,
        "best_dev_score": result.best.best_dev_score,
        "batch_size": result.best.batch_size,
        "learning_rate": result.best.learning_rate,
        "trials": len(result.trials),
        "failed_trials": sum(1 for t in result.trials if t.failed),
        "grid_seconds": result.seconds,
        "grid": grid.model_dump(mode="json"),
    }


def run_eval(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.report import ModelResults, phenomenon_table, write_csv

    if args.protocol == "metrics":
        return run_metrics(args)

    from core.encoder.checkpoint import encoder_only, load_checkpoint, restore_model
    from core.encoder.model import RobertaEncoder
    from core.evalx import load_pairs, turblimp_eval

    vocab = _load_vocab(args, config)
    checkpoint = encoder_only(load_checkpoint(_require(args.ckpt, "checkpoint")))
    checkpoint.config.check_tokenizer(len(vocab))
    model = RobertaEncoder(checkpoint.config)
    restore_model(checkpoint, model)
    model.to(args.device)
    params = merge_params(
        EvalParams, config.eval,
        length_normalize=args.length_normalize, overlength=args.overlength, batch_size=args.batch_size,
    )
    pairs = load_pairs(_require(args.pairs, "minimal pairs file"))
    report = turblimp_eval(model, vocab, pairs, params, show_progress=not args.quiet)

    name = args.name or args.ckpt.parent.name
    entry = ModelResults(name, scores={"turblimp": report.primary_score}, phenomena=report.breakdown)
    write_csv(phenomenon_table({name: entry}), args.out)
    return {
        "primary_score": report.primary_score,
        "phenomena": report.breakdown,
        "support": report.support,
        "params": params.model_dump(mode="json"),
    }


def run_metrics(args: argparse.Namespace) -> Dict[str, Any]:
    from core.evalx import classification_report, entity_report, tagging_report
    from core.finetune import TASK_PRESETS, load_dataset
    from core.report import write_csv
    from core.types import TaskKind
    from core.utils import round_half_up

    kind, labels, _ = TASK_PRESETS[args.task]
    gold = load_dataset(_require(args.gold, "gold file"), kind, labels)
    pred = load_dataset(_require(args.pred, "prediction file"), kind, labels)
    if kind == TaskKind.sequence_classification:
        report = classification_report(args.task, [r.label for r in gold], [r.label for r in pred], labels)
    elif kind == TaskKind.span_ner:
        report = entity_report(args.task, [r.tags for r in gold], [r.tags for r in pred])
    else:
        report = tagging_report(args.task, [r.tags for r in gold], [r.tags for r in pred])

    rows = [["name", "score"], [args.task, f"{round_half_up(report.primary_score):.2f}"]]
    rows += [[label, f"{round_half_up(score):.2f}"] for label, score in report.breakdown.items()]
    write_csv(rows, args.out)
    return {"task": args.task, "primary_score": report.primary_score, "breakdown": report.breakdown}


def run_report(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.report import report

    result = report(args.runs, args.out)
    return {"files": [str(p) for p in result.files], "warnings": result.warnings}


def run_synth(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    from core.synthetic import generate_all

    paths = generate_all(args.out, _seed(config), n_docs=args.docs, n_sentences=args.sentences, pairs=args.pairs)
    return {name: str(path) for name, path in paths.items()}


def run_serve(args: argparse.Namespace) -> None:
    from uvicorn import run as uvicorn_run

    if args.ckpt is not None:
        os.environ["SINDBERT_CKPT"] = str(_require(args.ckpt, "checkpoint"))
    if args.tokenizer is not None:
        os.environ["SINDBERT_TOKENIZER"] = str(_require(args.tokenizer, "tokenizer directory"))

    from api.app import app as api_app

    uvicorn_run(api_app, host=args.host, port=args.port)


STAGES = {
    "corpus": run_corpus,
    "tokenizer": run_tokenizer,
    "pretrain": run_pretrain,
    "finetune": run_finetune,
    "eval": run_eval,
    "report": run_report,
    "synth": run_synth,
}


def _json_safe(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def snapshot_flags(args: argparse.Namespace) -> Dict[str, Any]:
    "Every parsed flag, paths as strings, so run.json alone can re-run the stage"
    return {key: _json_safe(value) for key, value in sorted(vars(args).items())}


def _manifest_dir(args: argparse.Namespace) -> Path:
    # eval writes a CSV file; its run manifest goes next to it
    return args.out.parent if args.stage == "eval" else args.out


def _model_name(args: argparse.Namespace) -> Optional[str]:
    if getattr(args, "name", None):
        return args.name
    if args.stage == "pretrain":
        return args.out.name
    if getattr(args, "ckpt", None) is not None:
        return args.ckpt.parent.name
    return None


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"error: UsageError: {e}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(args.log_level)
    try:
        if args.stage == "serve":
            run_serve(args)
            return EXIT_OK
        config = resolve_config(args)
        started = time.time()
        results = STAGES[args.stage](args, config)
        from core.report import write_run_manifest

        snapshot = dump_run_config(config)
        snapshot["flags"] = snapshot_flags(args)
        write_run_manifest(
            _manifest_dir(args), args.stage, snapshot, config.seed, started,
            results=results, model=_model_name(args),
        )
    except (UsageError, ConfigurationError) as e:
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as e:
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _one_line(error: Exception) -> str:
    return " ".join(str(error).split())


def main(argv: Optional[List[str]] = None) -> None:
    sys.exit(dispatch(argv))
