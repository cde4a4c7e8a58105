from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple


class Source(Enum):
    mc4 = "mc4-like"
    oscar = "oscar-like"
    wiki = "wiki-like"
    other = "other"

    @classmethod
    def parse(cls, value: Optional[str]) -> "Source":
        for source in cls:
            if value in (source.value, source.name):
                return source
        return cls.other


@dataclass
class Document:
    id: str
    text: bytes
    source: Source = Source.other
    byte_len: int = field(init=False)

    def __post_init__(self):
        self.byte_len = len(self.text)


@dataclass
class FilterStats:
    kept: int = 0
    dropped_invalid_encoding: int = 0

    @property
    def total(self) -> int:
        return self.kept + self.dropped_invalid_encoding


@dataclass
class CorpusManifest:
    shards: List[Path]
    total_bytes: int
    seed: int
    filter_stats: FilterStats = field(default_factory=FilterStats)
    source_bytes: Dict[str, int] = field(default_factory=dict)
    documents: int = 0


@dataclass
class Encoding:
    ids: List[int]
    offsets: List[Tuple[int, int]]

    def __len__(self) -> int:
        return len(self.ids)


class TaskKind(Enum):
    token_tagging = "token_tagging"
    span_ner = "span_ner"
    sequence_classification = "sequence_classification"


class Metric(Enum):
    micro_f1 = "micro_f1"
    entity_f1 = "entity_f1"
    macro_f1 = "macro_f1"


@dataclass
class LabeledSequence:
    tokens: List[str]
    tags: List[str]


@dataclass
class LabeledText:
    id: str
    text: str
    label: str


# Order and column labels follow the TurBLiMP per-phenomenon table.
PHENOMENA: Dict[str, str] = {
    "anaphor_agreement": "Ana. Agr.",
    "argument_structure_transitive": "Arg. Tr.",
    "argument_structure_ditransitive": "Arg. Ditr.",
    "binding": "Bind.",
    "determiners": "Det.",
    "ellipsis": "Ellip.",
    "irregular_forms": "Irr.",
    "island_effects": "Isl.",
    "nominalization": "Nom.",
    "npi_licensing": "NPI",
    "passives": "Pass.",
    "quantifiers": "Quant.",
    "relative_clauses": "RelCl.",
    "scrambling": "Scramb.",
    "subject_agreement": "Subj. Agr.",
    "suspended_affixation": "Susp. Aff.",
}


@dataclass
class MinimalPair:
    phenomenon: str
    good: str
    bad: str

    def __post_init__(self):
        if self.phenomenon not in PHENOMENA:
            raise ValueError(f"Unknown phenomenon {self.phenomenon!r}")
        if self.good == self.bad:
            raise ValueError(f"Minimal pair in {self.phenomenon} has identical sentences")


@dataclass
class MetricReport:
    task: str
    primary_score: float
    breakdown: Dict[str, float] = field(default_factory=dict)
    support: Dict[str, int] = field(default_factory=dict)


@dataclass
class TrialResult:
    batch_size: int
    learning_rate: float
    epochs_run: int = 0
    best_dev_score: float = 0.0
    best_epoch: int = 0
    test_score: float = 0.0
    wall_clock_seconds: float = 0.0
    curve: List[float] = field(default_factory=list)
    failed: bool = False
    error: str = ""

    @property
    def config(self) -> Tuple[int, float]:
        return (self.batch_size, self.learning_rate)


@dataclass
class PerplexityLog:
    train_points: List[Tuple[int, float]] = field(default_factory=list)
    valid_points: List[Tuple[int, float]] = field(default_factory=list)

    def add_train(self, step: int, perplexity: float) -> None:
        if self.train_points and step <= self.train_points[-1][0]:
            raise ValueError(f"Training step {step} is not after {self.train_points[-1][0]}")
        self.train_points.append((step, perplexity))

    def add_valid(self, epoch: int, perplexity: float) -> None:
        if self.valid_points and epoch <= self.valid_points[-1][0]:
            raise ValueError(f"Epoch {epoch} is not after {self.valid_points[-1][0]}")
        self.valid_points.append((epoch, perplexity))

    def truncate(self, step: int, epoch: int) -> None:
        "Drop points recorded after a resume position"
        self.train_points = [p for p in self.train_points if p[0] <= step]
        self.valid_points = [p for p in self.valid_points if p[0] <= epoch]
