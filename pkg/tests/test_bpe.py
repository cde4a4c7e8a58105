import json
import logging
from collections import Counter

import numpy as np
import pytest

from core.bpe import (
    MERGES_HEADER,
    BpeVocab,
    SpecialTokens,
    bytes_to_unicode,
    chunks,
    merge_symbols,
    to_symbols,
    train_vocab,
)
from core.errors import ConfigurationError, DecodeError, InsufficientDataError
from core.types import Document


def docs(*texts):
    return [Document(id=str(i), text=t if isinstance(t, bytes) else t.encode("utf-8")) for i, t in enumerate(texts)]


def recount_merges(documents, target_size, specials=SpecialTokens()):
    "Brute force: recount every adjacent pair from scratch after each merge"
    words = Counter(to_symbols(c) for d in documents for c in chunks(d.text))
    segments = {w: list(w) for w in words}
    known = set(bytes_to_unicode().values())
    banned = set(specials.all())
    size = 256 + len(banned)
    merges = []
    while size < target_size:
        counts = Counter()
        for word, freq in words.items():
            symbols = segments[word]
            for pair in zip(symbols, symbols[1:]):
                counts[pair] += freq
        candidates = [(-c, p) for p, c in counts.items() if c > 0 and p[0] + p[1] not in banned]
        if not candidates:
            break
        best = min(candidates)[1]
        merges.append(best)
        if best[0] + best[1] not in known:
            known.add(best[0] + best[1])
            size += 1
        segments = {w: merge_symbols(s, best) for w, s in segments.items()}
    return merges


def random_corpus(rng):
    alphabet = list("aabbcdeğış ") + ["  "]
    text = "".join(rng.choice(alphabet) for _ in range(int(rng.integers(50, 1000))))
    return docs(*text.split("\n"))


def test_first_merge_is_most_frequent_pair():
    vocab = train_vocab(docs("aaab aaab"), 262)
    assert vocab.merges == [("a", "a")]


def test_no_merge_capacity_gives_base_and_specials():
    vocab = train_vocab(docs("zzzzzzzz"), 261)
    assert vocab.merges == []
    assert len(vocab) == 261


def test_training_is_deterministic(toy_documents):
    assert train_vocab(toy_documents, 300).merges == train_vocab(toy_documents, 300).merges


@pytest.mark.parametrize("case", range(50))
def test_matches_recount_oracle(case):
    rng = np.random.default_rng(case)
    corpus = random_corpus(rng)
    target = int(rng.integers(262, 301))
    assert train_vocab(corpus, target).merges == recount_merges(corpus, target)


def test_parallel_counting_matches_serial(toy_documents):
    assert train_vocab(toy_documents, 300, workers=2).merges == train_vocab(toy_documents, 300).merges


def test_exhausted_corpus_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="core.bpe"):
        vocab = train_vocab(docs("aaaa"), 400)
    assert len(vocab) < 400
    assert "exhausted" in caplog.text


def test_target_size_too_small():
    with pytest.raises(ConfigurationError):
        train_vocab(docs("abc"), 260)


def test_empty_sample():
    with pytest.raises(InsufficientDataError):
        train_vocab([], 300)


def test_special_token_spelling_is_never_merged():
    vocab = train_vocab(docs("<s> <s> <s> <mask> <mask>"), 290)
    results = {left + right for left, right in vocab.merges}
    assert not results & set(vocab.specials.all())
    assert vocab.decode(vocab.encode(b"<s><mask>").ids) == b"<s><mask>"
    with pytest.raises(ConfigurationError):
        BpeVocab([("<", "s"), ("<s", ">")])


def test_id_layout():
    vocab = BpeVocab([("a", "b")])
    assert (vocab.bos_id, vocab.pad_id, vocab.eos_id, vocab.unk_id) == (0, 1, 2, 3)
    assert vocab.mask_id == len(vocab) - 1 == 261
    assert sorted(vocab.token_to_id.values()) == list(range(len(vocab)))
    assert vocab.token_to_id["ab"] == 260


def test_duplicate_merge_result_reuses_id():
    vocab = BpeVocab([("a", "b"), ("b", "c"), ("a", "bc"), ("ab", "c")])
    assert len(vocab) == 256 + 5 + 3
    assert vocab.decode(vocab.encode(b"abc abc").ids) == b"abc abc"


def test_merge_operands_must_exist():
    with pytest.raises(ConfigurationError):
        BpeVocab([("ab", "c")])


def test_empty_text():
    vocab = BpeVocab([])
    assert vocab.encode(b"").ids == []
    assert vocab.encode(b"", add_specials=True).ids == [vocab.bos_id, vocab.eos_id]
    assert vocab.decode([vocab.bos_id, vocab.eos_id]) == b""


def test_multibyte_roundtrip(toy_vocab):
    text = "İstanbul'a gittik".encode("utf-8")
    assert toy_vocab.decode(toy_vocab.encode(text, add_specials=True).ids) == text


def assert_random_roundtrips(vocab, count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        data = rng.integers(0, 256, int(rng.integers(0, 4097)), dtype=np.uint8).tobytes()
        assert vocab.decode(vocab.encode(data).ids) == data


def test_random_bytes_roundtrip(toy_vocab):
    assert_random_roundtrips(toy_vocab, 300, seed=0)


@pytest.mark.slow
def test_random_bytes_roundtrip_ten_thousand(toy_vocab):
    assert_random_roundtrips(toy_vocab, 10_000, seed=1)


def test_offsets_tile_the_source(toy_vocab):
    text = "ben kitabı dün okudum .\n\n  sen  eve".encode("utf-8")
    encoding = toy_vocab.encode(text)
    assert encoding.offsets[0][0] == 0 and encoding.offsets[-1][1] == len(text)
    for (_, end), (start, _) in zip(encoding.offsets, encoding.offsets[1:]):
        assert end == start
    for token_id, (start, end) in zip(encoding.ids, encoding.offsets):
        assert toy_vocab.decode([token_id]) == text[start:end]


def test_unknown_id_is_rejected(toy_vocab):
    with pytest.raises(DecodeError, match=str(len(toy_vocab))):
        toy_vocab.decode([5, len(toy_vocab)])


def test_truncated_vocabularies_are_valid(toy_vocab):
    text = "onlar yine büyük kediyi sevdiler .".encode("utf-8")
    lengths = []
    for k in range(len(toy_vocab.merges) + 1):
        truncated = toy_vocab.truncate(k)
        assert truncated.merges == toy_vocab.merges[:k]
        assert truncated.decode(truncated.encode(text).ids) == text
        lengths.append(len(truncated.encode(text)))
    assert all(later <= earlier for earlier, later in zip(lengths, lengths[1:]))
    assert lengths[0] == len(text)


def test_save_and_load(tmp_path, toy_vocab):
    toy_vocab.save(tmp_path)
    loaded = BpeVocab.load(tmp_path)
    assert loaded == toy_vocab
    assert loaded.token_to_id == toy_vocab.token_to_id

    lines = (tmp_path / "merges.txt").read_text(encoding="utf-8").splitlines()
    assert lines[0] == MERGES_HEADER
    assert len(lines) == len(toy_vocab.merges) + 1
    ids = list(json.loads((tmp_path / "vocab.json").read_text(encoding="utf-8")).values())
    assert ids == sorted(ids)


def test_load_rejects_mismatched_vocab(tmp_path, toy_vocab):
    toy_vocab.save(tmp_path)
    data = json.loads((tmp_path / "vocab.json").read_text(encoding="utf-8"))
    data["extra"] = len(data)
    (tmp_path / "vocab.json").write_text(json.dumps(data), encoding="utf-8")
    with pytest.raises(ConfigurationError):
        BpeVocab.load(tmp_path)
