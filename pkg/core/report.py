"""Result tables (CSV) and perplexity curves (SVG) built from run manifests.

Every stage writes ``run.json`` beside its outputs. ``report`` reads a set of run
directories and emits model-by-task score tables, the per-phenomenon TurBLiMP table,
model sizes, computation times, best hyperparameters and the two-panel perplexity chart.
"""

import csv
import io
import json
import logging
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import transformers

from core.errors import ConfigurationError
from core.types import PHENOMENA, PerplexityLog
from core.utils import PathLike, format_hours_minutes, round_half_up

logger = logging.getLogger(__name__)

RUN_MANIFEST = "run.json"
TRAIN_CSV = "train_ppl.csv"
VALID_CSV = "valid_ppl.csv"

TASK_COLUMNS: Dict[str, str] = {"pos": "PoS", "ner": "NER", "offense": "Offense", "turblimp": "TurBLiMP AVG"}

PANEL_WIDTH = 420
PANEL_HEIGHT = 300
MARGIN = 48


def write_run_manifest(
    out_dir: PathLike,
    stage: str,
    config: Dict[str, Any],
    seed: Optional[int],
    started: float,
    results: Optional[Dict[str, Any]] = None,
    model: Optional[str] = None,
) -> Path:
    "Config snapshot, library versions, timings and stage results, enough to re-run the stage"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    finished = time.time()
    manifest = {
        "stage": stage,
        "model": model,
        "seed": seed,
        "config": config,
        "versions": {
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "transformers": transformers.__version__,
        },
        "timings": {"started": started, "finished": finished, "seconds": finished - started},
        "results": results or {},
    }
    path = out_dir / RUN_MANIFEST
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_run_manifest(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / RUN_MANIFEST
    try:
        with open(path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"Cannot read run manifest {path}: {e}") from e
    if not isinstance(manifest, dict) or "stage" not in manifest:
        raise ConfigurationError(f"Run manifest {path} has no stage")
    manifest["_dir"] = str(path.parent)
    return manifest


def write_perplexity_csv(log: PerplexityLog, out_dir: PathLike) -> None:
    out_dir = Path(out_dir)
    write_csv([["step", "perplexity"]] + [[str(s), f"{p:.6f}"] for s, p in log.train_points], out_dir / TRAIN_CSV)
    write_csv([["epoch", "perplexity"]] + [[str(e), f"{p:.6f}"] for e, p in log.valid_points], out_dir / VALID_CSV)


def read_perplexity_csv(directory: PathLike) -> PerplexityLog:
    directory = Path(directory)
    log = PerplexityLog()
    for name, add in ((TRAIN_CSV, log.add_train), (VALID_CSV, log.add_valid)):
        try:
            with open(directory / name, "r", encoding="utf-8", newline="") as f:
                rows = list(csv.reader(f))[1:]
            for x, p in rows:
                add(int(x), float(p))
        except (OSError, ValueError) as e:
            raise ConfigurationError(f"Cannot read perplexity log {directory / name}: {e}") from e
    return log


def write_csv(rows: Sequence[Sequence[str]], path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buffer = io.StringIO()
    csv.writer(buffer, lineterminator="\n").writerows(rows)
    path.write_text(buffer.getvalue(), encoding="utf-8")


def _score(value: Optional[float]) -> str:
    return "" if value is None else f"{round_half_up(value):.2f}"


def _polyline(points: Sequence[Tuple[float, float]], left: float, log_y: bool) -> Tuple[str, List[str]]:
    "Scaled polyline for one panel plus its axis labels"
    xs = [float(x) for x, _ in points]
    ys = [math.log10(y) if log_y else y for _, y in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0
    inner_w = PANEL_WIDTH - 2 * MARGIN
    inner_h = PANEL_HEIGHT - 2 * MARGIN

    vertices = []
    for x, y in zip(xs, ys):
        px = left + MARGIN + (x - x_lo) / x_span * inner_w
        py = MARGIN + (1.0 - (y - y_lo) / y_span) * inner_h
        vertices.append(f"{px:.2f},{py:.2f}")

    top = 10 ** y_hi if log_y else y_hi
    bottom = 10 ** y_lo if log_y else y_lo
    labels = [
        f'<text x="{left + MARGIN:.0f}" y="{PANEL_HEIGHT - MARGIN / 3:.0f}" font-size="10">{x_lo:g}</text>',
        f'<text x="{left + PANEL_WIDTH - MARGIN:.0f}" y="{PANEL_HEIGHT - MARGIN / 3:.0f}" font-size="10" text-anchor="end">{x_hi:g}</text>',
        f'<text x="{left + 4:.0f}" y="{MARGIN:.0f}" font-size="10">{top:.4g}</text>',
        f'<text x="{left + 4:.0f}" y="{PANEL_HEIGHT - MARGIN:.0f}" font-size="10">{bottom:.4g}</text>',
    ]
    return " ".join(vertices), labels


def render_perplexity_svg(log: PerplexityLog, log_y: bool = True) -> str:
    """Two panels: training perplexity per step (left) and validation perplexity per
    epoch (right). Each panel holds one polyline with one vertex per logged point."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{2 * PANEL_WIDTH}" height="{PANEL_HEIGHT}" '
        f'viewBox="0 0 {2 * PANEL_WIDTH} {PANEL_HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    panels = [
        ("Training perplexity", "step", log.train_points, "#1f77b4"),
        ("Validation perplexity", "epoch", log.valid_points, "#d62728"),
    ]
    for number, (title, axis, points, colour) in enumerate(panels):
        left = number * PANEL_WIDTH
        parts.append(f'<g id="{axis}-panel">')
        parts.append(
            f'<rect x="{left + MARGIN}" y="{MARGIN}" width="{PANEL_WIDTH - 2 * MARGIN}" '
            f'height="{PANEL_HEIGHT - 2 * MARGIN}" fill="none" stroke="#888"/>'
        )
        parts.append(f'<text x="{left + PANEL_WIDTH / 2:.0f}" y="{MARGIN / 2:.0f}" font-size="13" text-anchor="middle">{title}</text>')
        parts.append(f'<text x="{left + PANEL_WIDTH / 2:.0f}" y="{PANEL_HEIGHT - 4}" font-size="11" text-anchor="middle">{axis}</text>')
        if points:
            vertices, labels = _polyline(points, left, log_y)
            parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{vertices}"/>')
            parts.extend(labels)
        parts.append("</g>")
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_perplexity_svg(log: PerplexityLog, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_perplexity_svg(log), encoding="utf-8")


@dataclass
class ModelResults:
    name: str
    scores: Dict[str, float] = field(default_factory=dict)
    phenomena: Dict[str, float] = field(default_factory=dict)
    best_configs: Dict[str, Tuple[int, float]] = field(default_factory=dict)
    seconds: Dict[str, float] = field(default_factory=dict)
    vocab_size: Optional[int] = None
    parameters: Optional[int] = None
    perplexity_dir: Optional[Path] = None


@dataclass
class ReportResult:
    files: List[Path] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)


def collect_runs(run_dirs: Sequence[PathLike]) -> Tuple[Dict[str, ModelResults], List[str]]:
    models: Dict[str, ModelResults] = {}
    warnings: List[str] = []
    for directory in run_dirs:
        try:
            manifest = load_run_manifest(directory)
        except ConfigurationError as e:
            logger.warning(f"Skipping run {directory}: {e}")
            warnings.append(str(e))
            continue

        name = manifest.get("model") or Path(directory).name
        entry = models.setdefault(name, ModelResults(name))
        try:
            _merge_results(entry, manifest)
        except (KeyError, TypeError, ValueError) as e:
            logger.warning(f"Skipping run {directory}: incomplete results ({e!r})")
            warnings.append(f"{directory}: incomplete results")
    return dict(sorted(models.items())), warnings


def _merge_results(entry: ModelResults, manifest: Dict[str, Any]) -> None:
    results = manifest.get("results", {})
    stage = manifest["stage"]
    if stage == "pretrain":
        entry.vocab_size = results.get("vocab_size")
        entry.parameters = results.get("parameters")
        entry.perplexity_dir = Path(manifest["_dir"])
    elif stage == "finetune":
        task = results["task"]
        entry.scores[task] = float(results["test_score"])
        entry.best_configs[task] = (int(results["batch_size"]), float(results["learning_rate"]))
        entry.seconds[task] = float(results["grid_seconds"])
    elif stage == "eval" and "phenomena" in results:
        entry.phenomena = {k: float(v) for k, v in results["phenomena"].items()}
        entry.scores["turblimp"] = float(results["primary_score"])
    elif stage == "eval" and "task" in results:
        entry.scores[results["task"]] = float(results["primary_score"])


def task_table(models: Dict[str, ModelResults]) -> List[List[str]]:
    rows = [["Model"] + list(TASK_COLUMNS.values())]
    for name, entry in models.items():
        rows.append([name] + [_score(entry.scores.get(task)) for task in TASK_COLUMNS])
    return rows


def phenomenon_table(models: Dict[str, ModelResults]) -> List[List[str]]:
    rows = [["Model"] + list(PHENOMENA.values()) + ["AVG"]]
    for name, entry in models.items():
        if not entry.phenomena:
            continue
        rows.append(
            [name]
            + [_score(entry.phenomena.get(slug)) for slug in PHENOMENA]
            + [_score(entry.scores.get("turblimp"))]
        )
    return rows


def size_table(models: Dict[str, ModelResults]) -> List[List[str]]:
    rows = [["Model", "Vocab Size", "Parameters"]]
    for name, entry in models.items():
        if entry.parameters is None:
            continue
        rows.append([name, str(entry.vocab_size), str(entry.parameters)])
    return rows


def time_table(models: Dict[str, ModelResults]) -> List[List[str]]:
    rows = [["Model", "Task", "Computation Time (h:mm)"]]
    for name, entry in models.items():
        if not entry.seconds:
            continue
        for task, seconds in sorted(entry.seconds.items()):
            rows.append([name, TASK_COLUMNS.get(task, task), format_hours_minutes(seconds)])
        rows.append([name, "Total", format_hours_minutes(sum(entry.seconds.values()))])
    return rows


def hyperparameter_table(models: Dict[str, ModelResults]) -> List[List[str]]:
    rows = [["Model", "Task", "Batch Size", "Learning Rate"]]
    for name, entry in models.items():
        for task, (batch, lr) in sorted(entry.best_configs.items()):
            rows.append([name, TASK_COLUMNS.get(task, task), str(batch), f"{lr:g}"])
    return rows


def report(run_dirs: Sequence[PathLike], out_dir: PathLike) -> ReportResult:
    out_dir = Path(out_dir)
    models, warnings = collect_runs(run_dirs)
    result = ReportResult(warnings=warnings)

    tables = {
        "scores.csv": task_table(models),
        "turblimp.csv": phenomenon_table(models),
        "model_sizes.csv": size_table(models),
        "computation_time.csv": time_table(models),
        "best_hyperparameters.csv": hyperparameter_table(models),
    }
    for filename, rows in tables.items():
        write_csv(rows, out_dir / filename)
        result.files.append(out_dir / filename)

    for name, entry in models.items():
        if entry.perplexity_dir is None:
            continue
        try:
            log = read_perplexity_csv(entry.perplexity_dir)
        except ConfigurationError as e:
            logger.warning(f"Skipping perplexity curves for {name}: {e}")
            result.warnings.append(str(e))
            continue
        path = out_dir / f"perplexity-{name}.svg"
        write_perplexity_svg(log, path)
        result.files.append(path)

    if result.warnings:
        logger.warning(f"Report finished with {len(result.warnings)} warning(s)")
    return result
