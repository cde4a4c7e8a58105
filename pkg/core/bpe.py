"""Byte-level BPE: vocabulary training and lossless encode/decode.

Every byte maps to one printable code point, so any byte string tokenizes and
decodes back exactly. Merges never span two whitespace-delimited chunks.

Id layout (fairseq/RoBERTa convention): ``<s>``=0, ``<pad>``=1, ``</s>``=2,
``<unk>``=3, then the 256 byte tokens, then merge results in learned order, and
``<mask>`` as the last id.
"""

import heapq
import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import regex as re
from tqdm import tqdm

from core.errors import ConfigurationError, DecodeError, InsufficientDataError
from core.types import Document, Encoding
from core.utils import PathLike

logger = logging.getLogger(__name__)

Pair = Tuple[str, str]

MERGES_HEADER = "#version: 0.2"

# A chunk is an optional single space plus a non-space run, or a run of whitespace.
PRETOKENIZE = re.compile(rb" ?\S+|\s+(?!\S)|\s+")


@lru_cache()
def bytes_to_unicode() -> Dict[int, str]:
    "Reversible byte -> printable code point table used by byte-level BPE"
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


@lru_cache()
def unicode_to_bytes() -> Dict[str, int]:
    return {v: k for k, v in bytes_to_unicode().items()}


def to_symbols(data: bytes) -> str:
    table = bytes_to_unicode()
    return "".join(table[b] for b in data)


def chunks(text: bytes) -> List[bytes]:
    return PRETOKENIZE.findall(text)


@dataclass(frozen=True)
class SpecialTokens:
    bos: str = "<s>"
    pad: str = "<pad>"
    eos: str = "</s>"
    unk: str = "<unk>"
    mask: str = "<mask>"

    def leading(self) -> List[str]:
        return [self.bos, self.pad, self.eos, self.unk]

    def all(self) -> List[str]:
        return self.leading() + [self.mask]


class BpeVocab:
    """Merges, the token -> id map and the special tokens.

    Treated as immutable once built; encode/decode are safe to call from several
    threads on a shared instance.
    """

    def __init__(self, merges: Sequence[Pair], specials: SpecialTokens = SpecialTokens()) -> None:
        self.merges: List[Pair] = [tuple(m) for m in merges]  # type: ignore[misc]
        self.specials = specials
        self.token_to_id: Dict[str, int] = {}

        for token in specials.leading():
            self.token_to_id[token] = len(self.token_to_id)
        self.base_tokens = [bytes_to_unicode()[b] for b in range(256)]
        for token in self.base_tokens:
            self.token_to_id[token] = len(self.token_to_id)

        for rank, (left, right) in enumerate(self.merges):
            if left not in self.token_to_id or right not in self.token_to_id:
                raise ConfigurationError(f"Merge {rank} ({left!r}, {right!r}) uses a token not formed earlier")
            if left + right in specials.all():
                raise ConfigurationError(f"Merge {rank} spells the special token {left + right!r}")
            if left + right not in self.token_to_id:
                self.token_to_id[left + right] = len(self.token_to_id)
        self.token_to_id[specials.mask] = len(self.token_to_id)

        self.id_to_token: Dict[int, str] = {i: t for t, i in self.token_to_id.items()}
        self.ranks: Dict[Pair, int] = {pair: rank for rank, pair in reversed(list(enumerate(self.merges)))}
        self.special_ids: Set[int] = {self.token_to_id[t] for t in specials.all()}
        self._bpe = lru_cache(maxsize=1 << 16)(self._merge_chunk)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, BpeVocab) and self.merges == other.merges and self.specials == other.specials

    @property
    def bos_id(self) -> int:
        return self.token_to_id[self.specials.bos]

    @property
    def pad_id(self) -> int:
        return self.token_to_id[self.specials.pad]

    @property
    def eos_id(self) -> int:
        return self.token_to_id[self.specials.eos]

    @property
    def unk_id(self) -> int:
        return self.token_to_id[self.specials.unk]

    @property
    def mask_id(self) -> int:
        return self.token_to_id[self.specials.mask]

    def truncate(self, k: int) -> "BpeVocab":
        return BpeVocab(self.merges[:k], self.specials)

    def _merge_chunk(self, word: str) -> Tuple[str, ...]:
        symbols = list(word)
        while len(symbols) > 1:
            rank, pair = min(
                ((self.ranks.get(p, len(self.ranks)), p) for p in zip(symbols, symbols[1:])),
                key=lambda x: x[0],
            )
            if rank == len(self.ranks):
                break
            symbols = merge_symbols(symbols, pair)
        return tuple(symbols)

    def encode(self, text: bytes, add_specials: bool = False) -> Encoding:
        ids: List[int] = []
        offsets: List[Tuple[int, int]] = []
        position = 0
        for chunk in chunks(text):
            for token in self._bpe(to_symbols(chunk)):
                ids.append(self.token_to_id[token])
                offsets.append((position, position + len(token)))
                position += len(token)
        if add_specials:
            ids = [self.bos_id] + ids + [self.eos_id]
            offsets = [(0, 0)] + offsets + [(position, position)]
        return Encoding(ids=ids, offsets=offsets)

    def decode(self, ids: Iterable[int]) -> bytes:
        table = unicode_to_bytes()
        out = bytearray()
        for i in ids:
            token = self.id_to_token.get(int(i))
            if token is None:
                raise DecodeError(f"Unknown token id {i} (vocabulary has {len(self)} entries)")
            if int(i) in self.special_ids:
                continue
            out.extend(table[c] for c in token)
        return bytes(out)

    def save(self, out_dir: PathLike) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ordered = dict(sorted(self.token_to_id.items(), key=lambda kv: kv[1]))
        with open(out_dir / "vocab.json", "w", encoding="utf-8") as f:
            json.dump(ordered, f, ensure_ascii=False, indent=0)
            f.write("\n")
        with open(out_dir / "merges.txt", "w", encoding="utf-8") as f:
            f.write(MERGES_HEADER + "\n")
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, directory: PathLike) -> "BpeVocab":
        directory = Path(directory)
        try:
            with open(directory / "vocab.json", "r", encoding="utf-8") as f:
                token_to_id: Dict[str, int] = json.load(f)
            with open(directory / "merges.txt", "r", encoding="utf-8") as f:
                lines = [line.rstrip("\n") for line in f]
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot load tokenizer from {directory}: {e}") from e

        merges: List[Pair] = []
        for number, line in enumerate(lines, start=1):
            if not line or line.startswith("#version"):
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ConfigurationError(f"{directory / 'merges.txt'}:{number}: expected two subwords")
            merges.append((parts[0], parts[1]))

        by_id = {i: t for t, i in token_to_id.items()}
        specials = SpecialTokens(
            bos=by_id[0], pad=by_id[1], eos=by_id[2], unk=by_id[3], mask=by_id[len(by_id) - 1]
        )
        vocab = cls(merges, specials)
        if vocab.token_to_id != token_to_id:
            raise ConfigurationError(f"vocab.json in {directory} does not match its merges")
        return vocab


def merge_symbols(symbols: Sequence[str], pair: Pair) -> List[str]:
    "Replace non-overlapping occurrences of pair, scanning left to right"
    left, right = pair
    out: List[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def count_chunks(docs: Sequence[Document]) -> Counter:
    counts: Counter = Counter()
    for doc in docs:
        counts.update(to_symbols(chunk) for chunk in chunks(doc.text))
    return counts


def _batched(items: List[Document], size: int) -> List[List[Document]]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def train_vocab(
    sample: Iterable[Document],
    target_size: int,
    specials: SpecialTokens = SpecialTokens(),
    workers: int = 1,
    show_progress: bool = False,
) -> BpeVocab:
    """Learn merges greedily by pair frequency until the vocabulary has target_size entries.

    Pairs are counted over distinct chunks weighted by chunk frequency. Among pairs of
    equal frequency the lexicographically smallest (left, right) wins. A pair whose
    concatenation spells a special token is never merged.
    """
    floor = 256 + len(specials.all())
    if target_size < floor:
        raise ConfigurationError(f"target_size {target_size} is below the {floor} base and special tokens")

    docs = list(sample)
    if not docs:
        raise InsufficientDataError("Cannot train a vocabulary on an empty sample")

    counts: Counter = Counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for partial in pool.map(count_chunks, _batched(docs, max(1, len(docs) // (workers * 4)))):
                counts.update(partial)
    else:
        counts = count_chunks(docs)
    if not counts:
        raise InsufficientDataError("Sample contains no bytes to learn merges from")

    words: List[List[str]] = []
    freqs: List[int] = []
    for word, freq in sorted(counts.items()):
        words.append(list(word))
        freqs.append(freq)

    pair_counts: Dict[Pair, int] = {}
    where: Dict[Pair, Set[int]] = {}
    for index, symbols in enumerate(words):
        for pair in zip(symbols, symbols[1:]):
            pair_counts[pair] = pair_counts.get(pair, 0) + freqs[index]
            where.setdefault(pair, set()).add(index)

    heap = [(-count, pair[0], pair[1]) for pair, count in pair_counts.items()]
    heapq.heapify(heap)

    banned = set(specials.all())
    known: Set[str] = set(bytes_to_unicode().values())
    merges: List[Pair] = []
    size = floor

    progress = tqdm(total=target_size - floor, desc="Learning merges", disable=not show_progress)
    while size < target_size:
        best: Optional[Pair] = None
        while heap:
            negative, left, right = heapq.heappop(heap)
            pair = (left, right)
            current = pair_counts.get(pair, 0)
            if current == 0 or current != -negative or left + right in banned:
                continue
            best = pair
            break
        if best is None:
            logger.warning(f"Corpus exhausted mergeable pairs at {size} entries (target {target_size})")
            break

        merges.append(best)
        if best[0] + best[1] not in known:
            known.add(best[0] + best[1])
            size += 1
            progress.update(1)

        touched: Set[Pair] = set()
        for index in sorted(where.pop(best, ())):
            old = words[index]
            new = merge_symbols(old, best)
            if len(new) == len(old):
                continue
            freq = freqs[index]
            for pair in zip(old, old[1:]):
                pair_counts[pair] -= freq
                touched.add(pair)
            for pair in zip(new, new[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + freq
                where.setdefault(pair, set()).add(index)
                touched.add(pair)
            words[index] = new
        for pair in touched:
            count = pair_counts.get(pair, 0)
            if count > 0:
                heapq.heappush(heap, (-count, pair[0], pair[1]))
            else:
                pair_counts.pop(pair, None)
    progress.close()

    vocab = BpeVocab(merges, specials)
    logger.info(f"Learned {len(merges)} merges, vocabulary size {len(vocab)}")
    return vocab
