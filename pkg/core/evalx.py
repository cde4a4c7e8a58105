"""Scoring: token micro-F1, entity-level span F1, macro-F1 and minimal-pair
acceptability by pseudo-log-likelihood.

Metric functions return unrounded scores in [0, 100]; tables round half-up to two
decimals when written.
"""

import json
import logging
from collections import Counter, OrderedDict
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from core.bpe import BpeVocab
from core.config import EvalParams, Overlength
from core.encoder.model import RobertaEncoder
from core.errors import DatasetParseError, InputError, MetricError, TruncationError, UnknownLabelError
from core.types import PHENOMENA, MetricReport, MinimalPair
from core.utils import PathLike

logger = logging.getLogger(__name__)

Span = Tuple[str, int, int]
OUTSIDE = "O"


def _check_shapes(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> None:
    if len(gold) != len(pred):
        raise MetricError(f"{len(gold)} gold sequences but {len(pred)} predicted")
    for number, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise MetricError(f"Sequence {number}: {len(g)} gold tags but {len(p)} predicted")


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp + fp + fn == 0:
        return 100.0
    if tp == 0:
        return 0.0
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def micro_f1(
    gold: Sequence[Sequence[str]],
    pred: Sequence[Sequence[str]],
    negative: Iterable[str] = (OUTSIDE,),
) -> float:
    """Token-level F1 pooled over every tag.

    Tags in ``negative`` are never counted as positives. Without such tags in the label
    set this equals token accuracy.
    """
    _check_shapes(gold, pred)
    negative = set(negative)
    tp = fp = fn = 0
    for g_seq, p_seq in zip(gold, pred):
        for g, p in zip(g_seq, p_seq):
            if g == p:
                if g not in negative:
                    tp += 1
                continue
            if p not in negative:
                fp += 1
            if g not in negative:
                fn += 1
    return f1_from_counts(tp, fp, fn)


def bio_spans(tags: Sequence[str], strict: bool = False) -> List[Span]:
    """Spans (type, start, end) with inclusive end.

    An I-X following O or a different type opens a new span unless ``strict``.
    """
    spans: List[Span] = []
    current: Optional[List] = None
    for i, tag in enumerate(tags):
        if tag == OUTSIDE:
            if current:
                spans.append(tuple(current))  # type: ignore[arg-type]
            current = None
            continue
        prefix, _, kind = tag.partition("-")
        if prefix not in ("B", "I") or not kind:
            raise MetricError(f"Invalid BIO tag {tag!r} at position {i}")
        if prefix == "I" and current is not None and current[0] == kind:
            current[2] = i
            continue
        if prefix == "I":
            if strict:
                raise MetricError(f"I-{kind} at position {i} does not continue a {kind} span")
            logger.debug(f"Lenient BIO: I-{kind} at position {i} opens a span")
        if current:
            spans.append(tuple(current))  # type: ignore[arg-type]
        current = [kind, i, i]
    if current:
        spans.append(tuple(current))  # type: ignore[arg-type]
    return spans


def entity_counts(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> Dict[str, Tuple[int, int, int]]:
    "Per-type (tp, fp, fn) with boundary-exact matching"
    _check_shapes(gold, pred)
    counts: Dict[str, List[int]] = {}
    for g_seq, p_seq in zip(gold, pred):
        g_spans = set(bio_spans(g_seq))
        p_spans = set(bio_spans(p_seq))
        for span in p_spans:
            counts.setdefault(span[0], [0, 0, 0])[0 if span in g_spans else 1] += 1
        for span in g_spans - p_spans:
            counts.setdefault(span[0], [0, 0, 0])[2] += 1
    return {kind: (c[0], c[1], c[2]) for kind, c in sorted(counts.items())}


def entity_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> float:
    "Micro-averaged exact-match span F1 over all entity types"
    totals = [0, 0, 0]
    for tp, fp, fn in entity_counts(gold, pred).values():
        totals[0] += tp
        totals[1] += fp
        totals[2] += fn
    return f1_from_counts(*totals)


def per_class_f1(gold: Sequence[str], pred: Sequence[str], labels: Sequence[str]) -> "OrderedDict[str, float]":
    if len(gold) != len(pred):
        raise MetricError(f"{len(gold)} gold labels but {len(pred)} predicted")
    known = set(labels)
    for label in list(gold) + list(pred):
        if label not in known:
            raise UnknownLabelError(f"Label {label!r} is not in {sorted(known)}")

    scores: "OrderedDict[str, float]" = OrderedDict()
    for label in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == label and p == label)
        fp = sum(1 for g, p in zip(gold, pred) if g != label and p == label)
        fn = sum(1 for g, p in zip(gold, pred) if g == label and p != label)
        # a declared class missing from gold scores 0
        scores[label] = 0.0 if tp + fn == 0 else f1_from_counts(tp, fp, fn)
    return scores


def macro_f1(gold: Sequence[str], pred: Sequence[str], labels: Sequence[str]) -> float:
    "Unweighted mean of per-class F1 over the declared label set"
    if not labels:
        raise MetricError("macro_f1 needs a non-empty label set")
    scores = per_class_f1(gold, pred, labels)
    return sum(scores.values()) / len(scores)


def tagging_report(task: str, gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> MetricReport:
    support = Counter(tag for seq in gold for tag in seq)
    return MetricReport(task=task, primary_score=micro_f1(gold, pred), support=dict(sorted(support.items())))


def entity_report(task: str, gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> MetricReport:
    counts = entity_counts(gold, pred)
    return MetricReport(
        task=task,
        primary_score=entity_f1(gold, pred),
        breakdown={kind: f1_from_counts(*c) for kind, c in counts.items()},
        support={kind: c[0] + c[2] for kind, c in counts.items()},
    )


def classification_report(task: str, gold: Sequence[str], pred: Sequence[str], labels: Sequence[str]) -> MetricReport:
    breakdown = per_class_f1(gold, pred, labels)
    support = Counter(gold)
    return MetricReport(
        task=task,
        primary_score=sum(breakdown.values()) / len(breakdown),
        breakdown=dict(breakdown),
        support={label: support.get(label, 0) for label in labels},
    )


@torch.no_grad()
def pll_score(
    model: RobertaEncoder,
    vocab: BpeVocab,
    sentence: str,
    batch_size: int = 64,
    length_normalize: bool = False,
) -> float:
    """Pseudo-log-likelihood: for each non-special position, mask only that position
    and add the log-probability the model gives the original token."""
    ids = vocab.encode(sentence.encode("utf-8"), add_specials=True).ids
    n = len(ids) - 2
    if n < 1:
        raise InputError(f"Sentence {sentence!r} has no tokens to score")
    if len(ids) > model.config.max_positions:
        raise TruncationError(f"Sentence of {len(ids)} tokens exceeds max_positions {model.config.max_positions}")

    model.eval()
    device = next(model.parameters()).device
    original = torch.tensor(ids, dtype=torch.long, device=device)
    positions = torch.arange(1, n + 1, device=device)
    total = torch.zeros((), dtype=torch.float64)
    for start in range(0, n, batch_size):
        chunk = positions[start:start + batch_size]
        copies = original.repeat(len(chunk), 1)
        copies[torch.arange(len(chunk), device=device), chunk] = vocab.mask_id
        attention_mask = torch.ones_like(copies, dtype=torch.bool)
        logits = model.mlm_logits(model(copies, attention_mask))
        rows = logits[torch.arange(len(chunk), device=device), chunk]
        log_probs = F.log_softmax(rows.double(), dim=-1)
        total += log_probs.gather(1, original[chunk].unsqueeze(1)).sum().cpu()
    score = float(total)
    return score / n if length_normalize else score


class PllScorer:
    "Callable sentence -> PLL bound to a model, tokenizer and evaluation parameters"

    def __init__(self, model: RobertaEncoder, vocab: BpeVocab, params: EvalParams = EvalParams()) -> None:
        self.model = model
        self.vocab = vocab
        self.params = params

    def __call__(self, sentence: str) -> float:
        return pll_score(
            self.model, self.vocab, sentence,
            batch_size=self.params.batch_size, length_normalize=self.params.length_normalize,
        )


def score_pairs(
    pairs: Sequence[MinimalPair],
    scorer: Callable[[str], float],
    overlength: Overlength = Overlength.skip,
    show_progress: bool = False,
) -> MetricReport:
    """Per-phenomenon accuracy (good scored strictly above bad; ties are wrong) and
    their unweighted mean over the phenomena present."""
    correct: Counter = Counter()
    total: Counter = Counter()
    skipped = 0
    for pair in tqdm(pairs, desc="Scoring pairs", disable=not show_progress):
        try:
            good, bad = scorer(pair.good), scorer(pair.bad)
        except TruncationError as e:
            if overlength == Overlength.error:
                raise
            logger.warning(f"Skipping {pair.phenomenon} pair: {e}")
            skipped += 1
            continue
        total[pair.phenomenon] += 1
        if good > bad:
            correct[pair.phenomenon] += 1

    missing = [slug for slug in PHENOMENA if total[slug] == 0]
    if missing:
        logger.warning(f"No scored pairs for {len(missing)} phenomena: {', '.join(missing)}")
    breakdown = {slug: 100.0 * correct[slug] / total[slug] for slug in PHENOMENA if total[slug] > 0}
    if not breakdown:
        raise MetricError("No minimal pairs could be scored")

    support = {slug: total[slug] for slug in breakdown}
    support["skipped"] = skipped
    return MetricReport(
        task="turblimp",
        primary_score=sum(breakdown.values()) / len(breakdown),
        breakdown=breakdown,
        support=support,
    )


def turblimp_eval(
    model: RobertaEncoder,
    vocab: BpeVocab,
    pairs: Sequence[MinimalPair],
    params: EvalParams = EvalParams(),
    show_progress: bool = False,
) -> MetricReport:
    return score_pairs(pairs, PllScorer(model, vocab, params), params.overlength, show_progress)


def load_pairs(path: PathLike) -> List[MinimalPair]:
    "Newline-delimited JSON records {phenomenon, good, bad}"
    path = Path(path)
    pairs: List[MinimalPair] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    pairs.append(MinimalPair(obj["phenomenon"], obj["good"], obj["bad"]))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise DatasetParseError(f"{path}:{number}: bad minimal pair ({e})") from e
    except OSError as e:
        raise DatasetParseError(f"Cannot read minimal pairs {path}: {e}") from e
    return pairs
