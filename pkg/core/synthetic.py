"""Deterministic toy data: a small Turkish-like grammar for corpora, a UPOS tagging
task, a WikiANN-style NER task, an OffensEval-style TSV and minimal pairs for all
sixteen TurBLiMP phenomena. Everything is a function of the seed."""

import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from core.types import PHENOMENA, MinimalPair, Source
from core.utils import PathLike

logger = logging.getLogger(__name__)

Tagged = Tuple[List[str], List[str]]

PRONOUNS = ["ben", "sen", "o", "biz", "siz", "onlar"]
ADJECTIVES = ["büyük", "küçük", "güzel", "kırmızı", "eski", "yeni", "uzun", "sıcak"]
ADVERBS = ["dün", "bugün", "yine", "sonra", "erken", "hemen"]
# nominative, accusative, dative
NOUNS = [
    ("ev", "evi", "eve"),
    ("kedi", "kediyi", "kediye"),
    ("çocuk", "çocuğu", "çocuğa"),
    ("kitap", "kitabı", "kitaba"),
    ("elma", "elmayı", "elmaya"),
    ("okul", "okulu", "okula"),
    ("araba", "arabayı", "arabaya"),
    ("köpek", "köpeği", "köpeğe"),
]
# past tense by person: 1sg 2sg 3sg 1pl 2pl 3pl
VERBS = {
    "gör": ["gördüm", "gördün", "gördü", "gördük", "gördünüz", "gördüler"],
    "al": ["aldım", "aldın", "aldı", "aldık", "aldınız", "aldılar"],
    "sev": ["sevdim", "sevdin", "sevdi", "sevdik", "sevdiniz", "sevdiler"],
    "oku": ["okudum", "okudun", "okudu", "okuduk", "okudunuz", "okudular"],
    "ver": ["verdim", "verdin", "verdi", "verdik", "verdiniz", "verdiler"],
}
REFLEXIVES = ["kendimi", "kendini", "kendini", "kendimizi", "kendinizi", "kendilerini"]

PERSONS = [["Ahmet"], ["Ayşe"], ["Mehmet", "Demir"], ["Zeynep", "Kaya"], ["Emre"]]
LOCATIONS = [["İstanbul"], ["Ankara"], ["İzmir"], ["Kuzey", "Kıbrıs"], ["Bursa"]]
ORGANIZATIONS = [["Aselsan"], ["Türk", "Hava", "Yolları"], ["Boğaziçi", "Üniversitesi"], ["Turkcell"]]

NEUTRAL = ["bu film çok güzel", "hava bugün sıcak", "kitabı dün okudum", "maç harika geçti", "yemek lezzetliydi"]
INSULTS = ["aptal", "salak", "rezil", "beyinsiz"]


def _pick(rng: np.random.Generator, items: Sequence):
    return items[int(rng.integers(len(items)))]


def grammar_sentence(rng: np.random.Generator) -> Tagged:
    "PRON [ADV] [ADJ] NOUN-acc VERB-past-agreeing PUNCT, tagged with UPOS"
    person = int(rng.integers(len(PRONOUNS)))
    tokens, tags = [PRONOUNS[person]], ["PRON"]
    if rng.random() < 0.5:
        tokens.append(_pick(rng, ADVERBS))
        tags.append("ADV")
    if rng.random() < 0.6:
        tokens.append(_pick(rng, ADJECTIVES))
        tags.append("ADJ")
    tokens.append(_pick(rng, NOUNS)[1])
    tags.append("NOUN")
    tokens.append(VERBS[_pick(rng, sorted(VERBS))][person])
    tags.append("VERB")
    tokens.append(".")
    tags.append("PUNCT")
    return tokens, tags


def ner_sentence(rng: np.random.Generator) -> Tagged:
    tokens: List[str] = []
    tags: List[str] = []

    def add(words: List[str], kind: str) -> None:
        for i, word in enumerate(words):
            tokens.append(word)
            tags.append(f"{'B' if i == 0 else 'I'}-{kind}")

    def plain(*words: str) -> None:
        tokens.extend(words)
        tags.extend(["O"] * len(words))

    add(_pick(rng, PERSONS), "PER")
    plain(_pick(rng, ADVERBS))
    add(_pick(rng, LOCATIONS), "LOC")
    plain("şehrinde")
    add(_pick(rng, ORGANIZATIONS), "ORG")
    plain("için", "çalıştı", ".")
    return tokens, tags


def corpus_documents(n_docs: int, sentences_per_doc: int, seed: int) -> List[str]:
    rng = np.random.default_rng(seed)
    return [
        " ".join(" ".join(grammar_sentence(rng)[0]) for _ in range(sentences_per_doc))
        for _ in range(n_docs)
    ]


def write_grammar_corpus(
    path: PathLike,
    n_docs: int,
    seed: int,
    sentences_per_doc: int = 8,
    invalid_docs: int = 0,
) -> Path:
    """Newline-delimited JSON corpus. invalid_docs records carry raw bytes that are not
    valid UTF-8 so the ingestion filter has something to drop."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sources = [s.value for s in Source if s != Source.other]
    with open(path, "wb") as f:
        for number, text in enumerate(corpus_documents(n_docs, sentences_per_doc, seed)):
            record = {"id": f"doc-{number:06d}", "text": text, "source": sources[number % len(sources)]}
            f.write(json.dumps(record, ensure_ascii=False).encode("utf-8") + b"\n")
        for number in range(invalid_docs):
            text = "bozuk \udcff\udcfe metin".encode("utf-8", errors="surrogateescape")
            f.write(b"{\"id\": \"bad-" + str(number).encode() + b"\", \"text\": \"" + text + b"\", \"source\": \"other\"}\n")
    logger.info(f"Wrote {n_docs} synthetic documents to {path}")
    return path


def _write_conll(path: Path, sentences: Sequence[Tagged]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for tokens, tags in sentences:
            for token, tag in zip(tokens, tags):
                f.write(f"{token}\t{tag}\n")
            f.write("\n")


def _splits(n: int) -> Dict[str, int]:
    n_dev = max(1, n // 10)
    n_test = max(1, n // 10)
    return {"train": n - n_dev - n_test, "dev": n_dev, "test": n_test}


def write_tagging_task(out_dir: PathLike, n_sentences: int, seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in _splits(n_sentences).items():
        _write_conll(out_dir / f"{split}.conll", [grammar_sentence(rng) for _ in range(n)])
    return out_dir


def write_ner_task(out_dir: PathLike, n_sentences: int, seed: int) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, n in _splits(n_sentences).items():
        _write_conll(out_dir / f"{split}.conll", [ner_sentence(rng) for _ in range(n)])
    return out_dir


def offense_example(rng: np.random.Generator) -> Tuple[str, str]:
    if rng.random() < 0.4:
        return f"sen çok {_pick(rng, INSULTS)} birisin", "OFF"
    return f"{_pick(rng, ADVERBS)} {_pick(rng, NEUTRAL)}", "NOT"


def write_offense_task(out_dir: PathLike, n_texts: int, seed: int) -> Path:
    "train.tsv and test.tsv only; training code holds out its own dev split"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_test = max(2, n_texts // 10)
    for split, n in (("train", n_texts - n_test), ("test", n_test)):
        with open(out_dir / f"{split}.tsv", "w", encoding="utf-8") as f:
            f.write("id\ttweet\tsubtask_a\n")
            for number in range(n):
                text, label = offense_example(rng)
                f.write(f"{split}-{number}\t{text}\t{label}\n")
    return out_dir


def _subject_agreement(rng: np.random.Generator) -> Tuple[str, str]:
    person = int(rng.integers(6))
    wrong = (person + 1 + int(rng.integers(5))) % 6
    forms = VERBS[_pick(rng, sorted(VERBS))]
    obj = _pick(rng, NOUNS)[1]
    return f"{PRONOUNS[person]} {obj} {forms[person]}", f"{PRONOUNS[person]} {obj} {forms[wrong]}"


def _anaphor_agreement(rng: np.random.Generator) -> Tuple[str, str]:
    person = int(rng.integers(6))
    wrong = next(p for p in range(6) if REFLEXIVES[p] != REFLEXIVES[person])
    verb = VERBS["gör"][person]
    return f"{PRONOUNS[person]} {REFLEXIVES[person]} {verb}", f"{PRONOUNS[person]} {REFLEXIVES[wrong]} {verb}"


def _transitive(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)
    return f"ben {noun[1]} gördüm", f"ben {noun[2]} gördüm"


def _ditransitive(rng: np.random.Generator) -> Tuple[str, str]:
    first, second = _pick(rng, NOUNS), _pick(rng, NOUNS)
    return f"ben {first[2]} {second[1]} verdim", f"ben {first[1]} {second[1]} verdim"


def _binding(rng: np.random.Generator) -> Tuple[str, str]:
    name = _pick(rng, PERSONS)[0]
    return f"{name} kendini gördü", f"kendini {name} onu gördü"


def _determiners(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)[0]
    return f"ben bir {noun} aldım", f"ben {noun} bir aldım"


def _ellipsis(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)[1]
    return f"ben {noun} okudum sen de", f"ben {noun} okudum de sen"


def _irregular(rng: np.random.Generator) -> Tuple[str, str]:
    good, bad = _pick(rng, [("gelir", "geler"), ("alır", "alar"), ("olur", "olar"), ("verir", "verer")])
    return f"o her gün {good}", f"o her gün {bad}"


def _island(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)[1]
    return f"{noun} kimin aldığını biliyorum", f"kimin {noun} aldığını mı biliyorum ne"


def _nominalization(rng: np.random.Generator) -> Tuple[str, str]:
    verb = _pick(rng, [("okumayı", "okumak"), ("yazmayı", "yazmak"), ("koşmayı", "koşmak")])
    return f"ben {verb[0]} seviyorum", f"ben {verb[1]} seviyorum"


def _npi(rng: np.random.Generator) -> Tuple[str, str]:
    verb = _pick(rng, [("gelmedi", "geldi"), ("okumadı", "okudu"), ("görmedi", "gördü")])
    return f"hiç kimse {verb[0]}", f"hiç kimse {verb[1]}"


def _passive(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)[0]
    return f"{noun} çocuk tarafından görüldü", f"{noun} çocuk tarafından gördü"


def _quantifier(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, ["çocuk", "kedi", "köpek", "öğrenci"])
    return f"her {noun} geldi", f"her {noun}lar geldi"


def _relative_clause(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)[0]
    return f"okuduğum {noun} güzel", f"okudum {noun} güzel"


def _scrambling(rng: np.random.Generator) -> Tuple[str, str]:
    noun = _pick(rng, NOUNS)
    return f"{noun[1]} ben gördüm", f"{noun[0]} ben gördüm"


def _suspended_affixation(rng: np.random.Generator) -> Tuple[str, str]:
    first, second = _pick(rng, NOUNS)[0], _pick(rng, NOUNS)[0]
    return f"{first} ve {second}leri aldım", f"{first}leri ve {second} aldım"


PAIR_GENERATORS: Dict[str, Callable[[np.random.Generator], Tuple[str, str]]] = {
    "anaphor_agreement": _anaphor_agreement,
    "argument_structure_transitive": _transitive,
    "argument_structure_ditransitive": _ditransitive,
    "binding": _binding,
    "determiners": _determiners,
    "ellipsis": _ellipsis,
    "irregular_forms": _irregular,
    "island_effects": _island,
    "nominalization": _nominalization,
    "npi_licensing": _npi,
    "passives": _passive,
    "quantifiers": _quantifier,
    "relative_clauses": _relative_clause,
    "scrambling": _scrambling,
    "subject_agreement": _subject_agreement,
    "suspended_affixation": _suspended_affixation,
}


def minimal_pairs(per_phenomenon: int, seed: int) -> List[MinimalPair]:
    rng = np.random.default_rng(seed)
    pairs: List[MinimalPair] = []
    for phenomenon in PHENOMENA:
        generate = PAIR_GENERATORS[phenomenon]
        for _ in range(per_phenomenon):
            good, bad = generate(rng)
            adverb = _pick(rng, ADVERBS)
            pairs.append(MinimalPair(phenomenon, f"{adverb} {good} .", f"{adverb} {bad} ."))
    return pairs


def write_minimal_pairs(path: PathLike, per_phenomenon: int, seed: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for pair in minimal_pairs(per_phenomenon, seed):
            record = {"phenomenon": pair.phenomenon, "good": pair.good, "bad": pair.bad}
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    return path


def generate_all(out_dir: PathLike, seed: int, n_docs: int = 2000, n_sentences: int = 200, pairs: int = 50) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "corpus": write_grammar_corpus(out_dir / "corpus" / "raw.jsonl", n_docs, seed, invalid_docs=max(1, n_docs // 100)),
        "pos": write_tagging_task(out_dir / "tasks" / "pos", n_sentences, seed + 1),
        "ner": write_ner_task(out_dir / "tasks" / "ner", n_sentences, seed + 2),
        "offense": write_offense_task(out_dir / "tasks" / "offense", n_sentences, seed + 3),
        "pairs": write_minimal_pairs(out_dir / "turblimp" / "pairs.jsonl", pairs, seed + 4),
    }
