"""Corpus ingestion: encoding-validity filtering, seeded shuffling into shards,
vocabulary sampling and the train/validation split.

Records are newline-delimited JSON objects ``{"id", "text", "source"}``. A record is
kept only when its text bytes pass strict UTF-8 validation; nothing else is cleaned.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import EmptyCorpusError, IngestionError, InsufficientDataError
from core.types import CorpusManifest, Document, FilterStats, Source
from core.utils import PathLike, open_records

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class RawRecord:
    id: str
    text: bytes
    source: str = "other"


def is_valid_utf8(data: bytes) -> bool:
    try:
        data.decode("utf-8", errors="strict")
    except UnicodeDecodeError:
        return False
    return True


def _text_bytes(text: str) -> bytes:
    # Invalid bytes inside the JSON string survive as lone surrogates; map them back
    # to the original bytes (or to surrogate code units) so validation sees them.
    try:
        return text.encode("utf-8", errors="surrogateescape")
    except UnicodeEncodeError:
        return text.encode("utf-8", errors="surrogatepass")


def parse_record_line(line: bytes, where: str) -> RawRecord:
    try:
        obj = json.loads(line.decode("utf-8", errors="surrogateescape"))
    except json.JSONDecodeError as e:
        raise IngestionError(f"{where}: malformed record ({e.msg})") from e
    if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
        raise IngestionError(f"{where}: record has no text field")
    return RawRecord(
        id=str(obj.get("id", where)),
        text=_text_bytes(obj["text"]),
        source=str(obj.get("source", "other")),
    )


def read_raw_records(path: PathLike) -> Iterator[RawRecord]:
    path = Path(path)
    try:
        with open_records(path) as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                yield parse_record_line(line, f"{path}:{number}")
    except OSError as e:
        raise IngestionError(f"Cannot read shard {path}: {e}") from e


def filter_records(records: Iterable[RawRecord]) -> Tuple[List[Document], FilterStats]:
    stats = FilterStats()
    kept: List[Document] = []
    for record in records:
        # id and source are written back out with the text, so all three must be clean
        if all(is_valid_utf8(field) for field in (record.text, _text_bytes(record.id), _text_bytes(record.source))):
            kept.append(Document(id=record.id, text=record.text, source=Source.parse(record.source)))
            stats.kept += 1
        else:
            stats.dropped_invalid_encoding += 1
    return kept, stats


def _filter_file(path: Path) -> Tuple[List[Document], FilterStats]:
    docs, stats = filter_records(read_raw_records(path))
    logger.info(f"{path}: kept {stats.kept}, dropped {stats.dropped_invalid_encoding} with invalid encoding")
    return docs, stats


def filter_documents(paths: Sequence[PathLike], workers: int = 1) -> Tuple[List[Document], FilterStats]:
    """Filter every input file, dropping documents whose text is not valid UTF-8.

    Files are processed on a thread pool; results are merged in input order so the
    output does not depend on the worker count.
    """
    total = FilterStats()
    documents: List[Document] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for docs, stats in pool.map(_filter_file, [Path(p) for p in paths]):
            documents.extend(docs)
            total.kept += stats.kept
            total.dropped_invalid_encoding += stats.dropped_invalid_encoding

    if total.kept == 0:
        raise EmptyCorpusError(f"No documents survived filtering ({total.dropped_invalid_encoding} dropped)")
    return documents, total


def permutation(n: int, seed: int) -> np.ndarray:
    # numpy's Generator.permutation is a seeded Fisher-Yates shuffle
    return np.random.default_rng(seed).permutation(n)


def plan_shards(docs: Sequence[Document], seed: int, shard_bytes: int) -> List[List[Document]]:
    "Shuffle and greedily pack documents; a shard is closed once it reaches shard_bytes"
    if shard_bytes <= 0:
        raise ValueError("shard_bytes must be positive")
    if not docs:
        raise EmptyCorpusError("Cannot shard an empty corpus")

    shards: List[List[Document]] = [[]]
    filled = 0
    for index in permutation(len(docs), seed):
        doc = docs[int(index)]
        shards[-1].append(doc)
        filled += doc.byte_len
        if filled >= shard_bytes:
            shards.append([])
            filled = 0
    if not shards[-1]:
        shards.pop()
    return shards


def _document_line(doc: Document) -> str:
    record = {"id": doc.id, "text": doc.text.decode("utf-8"), "source": doc.source.value}
    return json.dumps(record, ensure_ascii=False) + "\n"


def shuffle_and_shard(
    docs: Sequence[Document],
    seed: int,
    shard_bytes: int,
    out_dir: PathLike,
    filter_stats: Optional[FilterStats] = None,
) -> CorpusManifest:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    paths: List[Path] = []
    source_bytes: Dict[str, int] = {}
    for number, shard in enumerate(plan_shards(docs, seed, shard_bytes)):
        path = out_dir / f"shard-{number:05d}.jsonl"
        with open(path, "w", encoding="utf-8") as f:
            for doc in shard:
                f.write(_document_line(doc))
                source_bytes[doc.source.value] = source_bytes.get(doc.source.value, 0) + doc.byte_len
        paths.append(path)

    manifest = CorpusManifest(
        shards=paths,
        total_bytes=sum(doc.byte_len for doc in docs),
        seed=seed,
        filter_stats=filter_stats or FilterStats(kept=len(docs)),
        source_bytes=dict(sorted(source_bytes.items())),
        documents=len(docs),
    )
    save_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(paths)} shards ({manifest.total_bytes} bytes) to {out_dir}")
    return manifest


def save_manifest(manifest: CorpusManifest, path: PathLike) -> None:
    path = Path(path)
    data = {
        "shards": [str(p.relative_to(path.parent)) if p.is_relative_to(path.parent) else str(p) for p in manifest.shards],
        "total_bytes": manifest.total_bytes,
        "seed": manifest.seed,
        "documents": manifest.documents,
        "filter_stats": {
            "kept": manifest.filter_stats.kept,
            "dropped_invalid_encoding": manifest.filter_stats.dropped_invalid_encoding,
        },
        "source_bytes": manifest.source_bytes,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def load_manifest(path: PathLike) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IngestionError(f"Cannot read manifest {path}: {e}") from e

    return CorpusManifest(
        shards=[path.parent / p for p in data["shards"]],
        total_bytes=int(data["total_bytes"]),
        seed=int(data["seed"]),
        filter_stats=FilterStats(**data.get("filter_stats", {})),
        source_bytes=dict(data.get("source_bytes", {})),
        documents=int(data.get("documents", 0)),
    )


def _to_document(record: RawRecord) -> Document:
    return Document(id=record.id, text=record.text, source=Source.parse(record.source))


def read_shards(manifest: CorpusManifest) -> Iterator[Document]:
    for shard in manifest.shards:
        for record in read_raw_records(shard):
            yield _to_document(record)


def index_documents(manifest: CorpusManifest) -> List[Tuple[int, int, int]]:
    "Offset index of (shard number, byte offset, byte_len) for every document"
    index: List[Tuple[int, int, int]] = []
    for number, shard in enumerate(manifest.shards):
        try:
            with open_records(shard) as f:
                offset = f.tell()
                line = f.readline()
                while line:
                    if line.strip():
                        record = parse_record_line(line, f"{shard}@{offset}")
                        index.append((number, offset, len(record.text)))
                    offset = f.tell()
                    line = f.readline()
        except OSError as e:
            raise IngestionError(f"Cannot read shard {shard}: {e}") from e
    return index


def sample_for_vocab(manifest: CorpusManifest, target_bytes: int, seed: int) -> Iterator[Document]:
    """Yield a seeded random subset whose cumulative size is the smallest reaching
    target_bytes (a prefix of a random permutation of the documents)."""
    if target_bytes > manifest.total_bytes:
        raise InsufficientDataError(
            f"Requested {target_bytes} bytes for vocabulary training, corpus has {manifest.total_bytes}"
        )

    index = index_documents(manifest)
    selected: List[Tuple[int, int, int]] = []
    collected = 0
    for position in permutation(len(index), seed):
        if collected >= target_bytes:
            break
        entry = index[int(position)]
        selected.append(entry)
        collected += entry[2]

    handles = {}
    try:
        for number, offset, _ in selected:
            if number not in handles:
                handles[number] = open_records(manifest.shards[number])
            f = handles[number]
            f.seek(offset)
            yield _to_document(parse_record_line(f.readline(), f"{manifest.shards[number]}@{offset}"))
    finally:
        for f in handles.values():
            f.close()


def split_validation(docs: Sequence[Document], valid_fraction: float, seed: int) -> Tuple[List[Document], List[Document]]:
    if not 0.0 < valid_fraction < 1.0:
        raise ValueError("valid_fraction must lie in (0, 1)")
    if len(docs) < 2:
        raise InsufficientDataError("Need at least two documents to hold out a validation split")

    n_valid = min(len(docs) - 1, max(1, round(len(docs) * valid_fraction)))
    order = permutation(len(docs), seed)
    held_out = set(int(i) for i in order[:n_valid])
    train = [doc for i, doc in enumerate(docs) if i not in held_out]
    valid = [doc for i, doc in enumerate(docs) if i in held_out]
    return train, valid


def prepare_corpus(
    inputs: Sequence[PathLike],
    out_dir: PathLike,
    shard_bytes: int,
    valid_fraction: float,
    seed: int,
    workers: int = 1,
) -> Tuple[CorpusManifest, CorpusManifest]:
    "Filter, split and shard raw inputs into out_dir/train and out_dir/valid"
    out_dir = Path(out_dir)
    docs, stats = filter_documents(inputs, workers=workers)
    train, valid = split_validation(docs, valid_fraction, seed)
    # both manifests carry the whole-input counts; per-split sizes are in `documents`
    train_manifest = shuffle_and_shard(train, seed, shard_bytes, out_dir / "train", stats)
    valid_manifest = shuffle_and_shard(valid, seed, shard_bytes, out_dir / "valid", stats)
    return train_manifest, valid_manifest
