"""Downstream fine-tuning: dataset loading, first-subword label alignment, one trial
with early stopping under a linear warmup schedule, and the batch size x learning
rate grid with deterministic best-trial selection."""

import logging
import math
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from transformers import get_linear_schedule_with_warmup

from core.bpe import BpeVocab
from core.config import GridSpec
from core.encoder.checkpoint import Checkpoint, capture, encoder_only, restore_model, save_checkpoint
from core.encoder.model import HeadSpec, RobertaEncoder, TaskModel
from core.errors import (
    ConfigurationError,
    DatasetParseError,
    GridError,
    NonFiniteLossError,
    UnknownLabelError,
)
from core.evalx import entity_f1, macro_f1, micro_f1
from core.types import LabeledSequence, LabeledText, Metric, TaskKind, TrialResult
from core.utils import PathLike, seed_everything

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100

UPOS = [
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
]
NER_TAGS = ["O", "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC"]
OFFENSE_LABELS = ["NOT", "OFF"]

METRIC_FOR_KIND = {
    TaskKind.token_tagging: Metric.micro_f1,
    TaskKind.span_ner: Metric.entity_f1,
    TaskKind.sequence_classification: Metric.macro_f1,
}

Records = Union[List[LabeledSequence], List[LabeledText]]


@dataclass
class TaskSpec:
    name: str
    kind: TaskKind
    labels: List[str]
    metric: Metric
    train: Path
    test: Path
    dev: Optional[Path] = None

    def __post_init__(self):
        if not self.labels:
            raise ConfigurationError(f"Task {self.name} has an empty label set")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigurationError(f"Task {self.name} has duplicate labels")
        if METRIC_FOR_KIND[self.kind] != self.metric:
            raise ConfigurationError(f"Task {self.name}: {self.kind.value} is scored with {METRIC_FOR_KIND[self.kind].value}")


TASK_PRESETS: Dict[str, Tuple[TaskKind, List[str], Tuple[str, ...]]] = {
    "pos": (TaskKind.token_tagging, UPOS, (".conllu", ".conll", ".txt")),
    "ner": (TaskKind.span_ner, NER_TAGS, (".conll", ".txt", ".bio")),
    "offense": (TaskKind.sequence_classification, OFFENSE_LABELS, (".tsv",)),
}


def _split_files(data_dir: Path, split: str, suffixes: Tuple[str, ...]) -> List[Path]:
    return sorted(p for p in data_dir.iterdir() if p.is_file() and split in p.stem and p.suffix in suffixes)


def task_from_preset(name: str, data_dir: PathLike) -> Tuple[TaskSpec, Dict[str, List[Path]]]:
    """Task definition plus the files for each split found in data_dir.

    Several files for one split (e.g. multiple UD treebanks) are concatenated split-wise.
    """
    if name not in TASK_PRESETS:
        raise ConfigurationError(f"Unknown task {name!r}, expected one of {sorted(TASK_PRESETS)}")
    kind, labels, suffixes = TASK_PRESETS[name]
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigurationError(f"Task data directory {data_dir} does not exist")

    files = {split: _split_files(data_dir, split, suffixes) for split in ("train", "dev", "test")}
    for split in ("train", "test"):
        if not files[split]:
            raise ConfigurationError(f"No {split} file for task {name} in {data_dir}")
    task = TaskSpec(
        name=name,
        kind=kind,
        labels=list(labels),
        metric=METRIC_FOR_KIND[kind],
        train=files["train"][0],
        test=files["test"][0],
        dev=files["dev"][0] if files["dev"] else None,
    )
    return task, files


def _check_label(label: str, labels: Sequence[str], where: str) -> None:
    if label not in labels:
        raise UnknownLabelError(f"{where}: unknown label {label!r}")


def _read_lines(path: Path) -> List[str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return [line.rstrip("\n").rstrip("\r") for line in f]
    except OSError as e:
        raise DatasetParseError(f"Cannot read {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise DatasetParseError(f"{path} is not valid UTF-8: {e}") from e


def _parse_columns(path: Path, labels: Sequence[str], conllu: bool) -> List[LabeledSequence]:
    records: List[LabeledSequence] = []
    tokens: List[str] = []
    tags: List[str] = []
    for number, line in enumerate(_read_lines(path) + [""], start=1):
        if not line.strip():
            if tokens:
                records.append(LabeledSequence(tokens, tags))
                tokens, tags = [], []
            continue
        if (conllu and line.startswith("#")) or line.startswith("-DOCSTART-"):
            continue

        where = f"{path}:{number}"
        if conllu:
            columns = line.split("\t")
            if len(columns) != 10:
                raise DatasetParseError(f"{where}: expected 10 CoNLL-U columns, got {len(columns)}")
            if "-" in columns[0] or "." in columns[0]:
                continue
            token, tag = columns[1], columns[3]
        else:
            columns = line.split("\t") if "\t" in line else line.split()
            if len(columns) < 2 or not columns[0]:
                raise DatasetParseError(f"{where}: expected token and tag columns")
            token, tag = columns[0], columns[-1]
        _check_label(tag, labels, where)
        tokens.append(token)
        tags.append(tag)
    return records


def _parse_tsv(path: Path, labels: Sequence[str]) -> List[LabeledText]:
    records: List[LabeledText] = []
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        columns = line.split("\t")
        if number == 1 and columns[0].lower() == "id":
            continue
        where = f"{path}:{number}"
        if len(columns) != 3:
            raise DatasetParseError(f"{where}: expected id, text and label columns, got {len(columns)}")
        _check_label(columns[2], labels, where)
        records.append(LabeledText(columns[0], columns[1], columns[2]))
    return records


def load_dataset(path: PathLike, kind: TaskKind, labels: Sequence[str]) -> Records:
    path = Path(path)
    if not path.exists():
        raise DatasetParseError(f"Dataset {path} does not exist")
    if kind == TaskKind.sequence_classification:
        return _parse_tsv(path, labels)

    records = _parse_columns(path, labels, conllu=path.suffix == ".conllu")
    if kind == TaskKind.span_ner:
        repaired = sum(_lenient_repairs(r.tags) for r in records)
        if repaired:
            logger.warning(f"{path}: {repaired} I- tag(s) open a span without a preceding B-")
    return records


def load_split(files: Sequence[PathLike], kind: TaskKind, labels: Sequence[str]) -> Records:
    records: list = []
    for path in files:
        records.extend(load_dataset(path, kind, labels))
    return records


def _lenient_repairs(tags: Sequence[str]) -> int:
    count = 0
    previous = "O"
    for tag in tags:
        if tag.startswith("I-") and previous[2:] != tag[2:]:
            count += 1
        previous = tag
    return count


def split_dev(records: Records, fraction: float, seed: int) -> Tuple[Records, Records]:
    "Seeded hold-out used when a task ships no dev file"
    if len(records) < 2:
        raise ConfigurationError("Need at least two training records to hold out a dev split")
    n_dev = min(len(records) - 1, max(1, round(len(records) * fraction)))
    order = np.random.default_rng(seed).permutation(len(records))
    held = set(int(i) for i in order[:n_dev])
    train = [r for i, r in enumerate(records) if i not in held]
    dev = [r for i, r in enumerate(records) if i in held]
    return train, dev  # type: ignore[return-value]


@dataclass
class Example:
    token_ids: List[int]
    label_ids: List[int]
    group: int


@dataclass
class EncodedSplit:
    examples: List[Example]
    gold: list

    def __len__(self) -> int:
        return len(self.gold)


@dataclass
class TaskData:
    kind: TaskKind
    labels: List[str]
    train: EncodedSplit
    dev: EncodedSplit
    test: EncodedSplit
    pad_id: int


def align_words(vocab: BpeVocab, words: Sequence[str]) -> List[List[int]]:
    "Subword ids per word; words after the first carry their leading space"
    return [vocab.encode((word if i == 0 else " " + word).encode("utf-8")).ids for i, word in enumerate(words)]


def encode_sequence(
    vocab: BpeVocab, record: LabeledSequence, labels: Sequence[str], max_len: int, group: int
) -> List[Example]:
    """First-subword alignment. Sentences longer than the model window are split into
    consecutive word windows so every word keeps exactly one labeled position."""
    index = {label: i for i, label in enumerate(labels)}
    pieces = align_words(vocab, record.tokens)
    room = max_len - 2
    examples: List[Example] = []
    ids: List[int] = [vocab.bos_id]
    targets: List[int] = [IGNORE_INDEX]
    for word_pieces, tag in zip(pieces, record.tags):
        word_pieces = word_pieces[:room]
        if len(ids) - 1 + len(word_pieces) > room:
            examples.append(Example(ids + [vocab.eos_id], targets + [IGNORE_INDEX], group))
            ids, targets = [vocab.bos_id], [IGNORE_INDEX]
        ids.extend(word_pieces)
        targets.extend([index[tag]] + [IGNORE_INDEX] * (len(word_pieces) - 1))
    examples.append(Example(ids + [vocab.eos_id], targets + [IGNORE_INDEX], group))
    return examples


def encode_text(vocab: BpeVocab, record: LabeledText, labels: Sequence[str], max_len: int, group: int) -> Example:
    ids = vocab.encode(record.text.encode("utf-8")).ids[: max_len - 2]
    return Example([vocab.bos_id] + ids + [vocab.eos_id], [labels.index(record.label)], group)


def encode_split(vocab: BpeVocab, records: Records, kind: TaskKind, labels: Sequence[str], max_len: int) -> EncodedSplit:
    examples: List[Example] = []
    gold: list = []
    for group, record in enumerate(records):
        if kind == TaskKind.sequence_classification:
            examples.append(encode_text(vocab, record, labels, max_len, group))  # type: ignore[arg-type]
            gold.append(record.label)  # type: ignore[union-attr]
        else:
            examples.extend(encode_sequence(vocab, record, labels, max_len, group))  # type: ignore[arg-type]
            gold.append(list(record.tags))  # type: ignore[union-attr]
    return EncodedSplit(examples, gold)


def prepare_task(
    vocab: BpeVocab,
    task: TaskSpec,
    files: Dict[str, List[Path]],
    max_len: int,
    seed: int,
    dev_fraction: float = 0.1,
) -> TaskData:
    train = load_split(files["train"], task.kind, task.labels)
    test = load_split(files["test"], task.kind, task.labels)
    if files.get("dev"):
        dev = load_split(files["dev"], task.kind, task.labels)
    else:
        logger.info(f"No dev file for {task.name}; holding out {dev_fraction:.0%} of train")
        train, dev = split_dev(train, dev_fraction, seed)
    if not dev:
        raise ConfigurationError(f"Task {task.name} has an empty dev set")
    return TaskData(
        kind=task.kind,
        labels=list(task.labels),
        train=encode_split(vocab, train, task.kind, task.labels, max_len),
        dev=encode_split(vocab, dev, task.kind, task.labels, max_len),
        test=encode_split(vocab, test, task.kind, task.labels, max_len),
        pad_id=vocab.pad_id,
    )


def collate(examples: Sequence[Example], pad_id: int, kind: TaskKind) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    width = max(len(e.token_ids) for e in examples)
    token_ids = torch.full((len(examples), width), pad_id, dtype=torch.long)
    attention_mask = torch.zeros((len(examples), width), dtype=torch.bool)
    if kind == TaskKind.sequence_classification:
        labels = torch.tensor([e.label_ids[0] for e in examples], dtype=torch.long)
    else:
        labels = torch.full((len(examples), width), IGNORE_INDEX, dtype=torch.long)
    for row, example in enumerate(examples):
        n = len(example.token_ids)
        token_ids[row, :n] = torch.tensor(example.token_ids)
        attention_mask[row, :n] = True
        if kind != TaskKind.sequence_classification:
            labels[row, :n] = torch.tensor(example.label_ids)
    return token_ids, attention_mask, labels


class EarlyStopping:
    "Stops once the score has not improved for `patience` consecutive epochs"

    def __init__(self, patience: int) -> None:
        if patience < 1:
            raise ConfigurationError(f"patience must be at least 1, got {patience}")
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@torch.no_grad()
def predict(model: TaskModel, split: EncodedSplit, data: TaskData, batch_size: int, device: torch.device) -> list:
    model.eval()
    per_group: Dict[int, List[str]] = {}
    for start in range(0, len(split.examples), batch_size):
        chunk = split.examples[start:start + batch_size]
        token_ids, attention_mask, labels = collate(chunk, data.pad_id, data.kind)
        logits = model(token_ids.to(device), attention_mask.to(device)).cpu()
        best = logits.argmax(dim=-1)
        for row, example in enumerate(chunk):
            if data.kind == TaskKind.sequence_classification:
                per_group[example.group] = [data.labels[int(best[row])]]
            else:
                positions = (labels[row] != IGNORE_INDEX).nonzero().flatten()
                per_group.setdefault(example.group, []).extend(data.labels[int(best[row, p])] for p in positions)
    predictions = [per_group.get(group, []) for group in range(len(split.gold))]
    if data.kind == TaskKind.sequence_classification:
        return [p[0] for p in predictions]
    return predictions


def score_predictions(kind: TaskKind, labels: Sequence[str], gold: list, pred: list) -> float:
    if kind == TaskKind.token_tagging:
        return micro_f1(gold, pred)
    if kind == TaskKind.span_ner:
        return entity_f1(gold, pred)
    return macro_f1(gold, pred, labels)


def evaluate(model: TaskModel, split: EncodedSplit, data: TaskData, batch_size: int, device: torch.device) -> float:
    if not len(split):
        raise ConfigurationError("Cannot evaluate on an empty split")
    return score_predictions(data.kind, data.labels, split.gold, predict(model, split, data, batch_size, device))


def build_task_model(checkpoint: Checkpoint, data: TaskData) -> TaskModel:
    encoder = RobertaEncoder(checkpoint.config)
    restore_model(encoder_only(checkpoint), encoder)
    return TaskModel(encoder, HeadSpec(data.kind, len(data.labels)))


def _loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE_INDEX)


def train_one(
    checkpoint: Checkpoint,
    data: TaskData,
    batch_size: int,
    learning_rate: float,
    max_epochs: int,
    patience: int,
    warmup_fraction: float,
    seed: int,
    out_path: Optional[PathLike] = None,
    device: str = "cpu",
) -> TrialResult:
    """One grid trial. The test score comes from the best-dev epoch's weights, which are
    also written to out_path when given."""
    started = time.perf_counter()
    if not len(data.dev):
        raise ConfigurationError("Empty dev set")

    seed_everything(seed)
    target = torch.device(device)
    model = build_task_model(checkpoint, data).to(target)
    optimizer = torch.optim.AdamW(model.parameters(), lr=learning_rate, betas=(0.9, 0.98), eps=1e-6, weight_decay=0.01)
    steps_per_epoch = math.ceil(len(data.train.examples) / batch_size)
    planned = max_epochs * steps_per_epoch
    scheduler = get_linear_schedule_with_warmup(optimizer, int(warmup_fraction * planned), planned)

    stopper = EarlyStopping(patience)
    result = TrialResult(batch_size=batch_size, learning_rate=learning_rate)
    best_state: Dict[str, torch.Tensor] = {}
    step = 0
    for epoch in range(1, max_epochs + 1):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(len(data.train.examples))
        for start in range(0, len(order), batch_size):
            chunk = [data.train.examples[int(i)] for i in order[start:start + batch_size]]
            token_ids, attention_mask, labels = collate(chunk, data.pad_id, data.kind)
            logits = model(token_ids.to(target), attention_mask.to(target))
            loss = _loss(logits, labels.to(target))
            step += 1
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"Non-finite loss at step {step} (batch {batch_size}, lr {learning_rate})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()

        score = evaluate(model, data.dev, data, batch_size, target)
        result.curve.append(score)
        if stopper.update(score):
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        logger.debug(f"bs {batch_size} lr {learning_rate:g} epoch {epoch}: dev {score:.2f}")
        if stopper.should_stop:
            break

    model.load_state_dict(best_state)
    result.epochs_run = stopper.epoch
    result.best_dev_score = stopper.best
    result.best_epoch = stopper.best_epoch
    result.test_score = evaluate(model, data.test, data, batch_size, target)
    if out_path is not None:
        save_checkpoint(
            capture(model, checkpoint.config, step=step, head=model.spec, extra={"best_epoch": stopper.best_epoch}),
            out_path,
        )
    result.wall_clock_seconds = time.perf_counter() - started
    return result


@dataclass
class GridResult:
    trials: List[TrialResult]
    best: TrialResult
    seconds: float
    checkpoints: Dict[Tuple[int, float], Path] = field(default_factory=dict)


def trial_name(batch_size: int, learning_rate: float) -> str:
    return f"bs{batch_size}-lr{learning_rate:g}"


def _run_trial(args: tuple) -> TrialResult:
    checkpoint, data, batch_size, lr, grid, out_path, device = args
    try:
        return train_one(
            checkpoint, data, batch_size, lr, grid.max_epochs, grid.patience, grid.warmup_fraction, grid.seed,
            out_path=out_path, device=device,
        )
    except NonFiniteLossError as e:
        logger.warning(f"Trial {trial_name(batch_size, lr)} failed: {e}")
        return TrialResult(batch_size=batch_size, learning_rate=lr, failed=True, error=str(e))


def select_best(trials: Sequence[TrialResult]) -> TrialResult:
    "Highest dev score; ties go to the lower learning rate, then the smaller batch"
    usable = [t for t in trials if not t.failed]
    if not usable:
        raise GridError(f"All {len(trials)} grid trials failed")
    return min(usable, key=lambda t: (-t.best_dev_score, t.learning_rate, t.batch_size))


def run_grid(
    checkpoint: Checkpoint,
    data: TaskData,
    grid: GridSpec,
    out_dir: Optional[PathLike] = None,
    device: str = "cpu",
) -> GridResult:
    started = time.perf_counter()
    paths: Dict[Tuple[int, float], Path] = {}
    jobs = []
    for batch_size, lr in grid.configs:
        out_path = None
        if out_dir is not None:
            out_path = Path(out_dir) / "trials" / f"{trial_name(batch_size, lr)}.ckpt"
            paths[(batch_size, lr)] = out_path
        jobs.append((checkpoint, data, batch_size, lr, grid, out_path, device))

    logger.info(f"Running {len(jobs)} trials on {grid.workers} worker(s)")
    if grid.workers > 1:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            trials = list(pool.map(_run_trial, jobs))
    else:
        trials = [_run_trial(job) for job in jobs]

    best = select_best(trials)
    logger.info(
        f"Best trial {trial_name(*best.config)}: dev {best.best_dev_score:.2f}, test {best.test_score:.2f}"
    )
    if out_dir is not None:
        shutil.copyfile(paths[best.config], Path(out_dir) / "best.ckpt")
    return GridResult(trials=trials, best=best, seconds=time.perf_counter() - started, checkpoints=paths)


def trials_table(result: GridResult) -> List[List[str]]:
    rows = [["batch_size", "learning_rate", "epochs_run", "best_epoch", "best_dev_score", "test_score", "failed"]]
    for t in result.trials:
        rows.append([
            str(t.batch_size), f"{t.learning_rate:g}", str(t.epochs_run), str(t.best_epoch),
            f"{t.best_dev_score:.4f}", f"{t.test_score:.4f}", str(t.failed).lower(),
        ])
    return rows
