import math

import numpy as np
import pytest
import torch
from transformers import get_polynomial_decay_schedule_with_warmup

from conftest import make_vocab
from core.config import ModelConfig, TrainSchedule
from core.corpus import shuffle_and_shard
from core.encoder.checkpoint import load_checkpoint
from core.encoder.model import Batch
from core.errors import ConfigurationError, NoMaskedPositions, ScheduleError
from core.pretrain import (
    IGNORE_INDEX,
    Pretrainer,
    apply_dynamic_masking,
    content_tokens,
    lr_at,
    mlm_loss,
    pack_sequences,
    train,
)
from core.report import TRAIN_CSV, VALID_CSV
from core.synthetic import corpus_documents
from core.types import Document


def random_blocks(vocab, n_seq, seq_len, seed=0):
    rng = np.random.default_rng(seed)
    stream = rng.integers(4, vocab.mask_id, n_seq * (seq_len - 2)).tolist()
    return pack_sequences(stream, seq_len, vocab)


def small_schedule(**overrides):
    values = dict(
        total_updates=12, warmup_updates=2, peak_lr=1e-3, batch_sequences=8, micro_batch=4, seq_len=32, seed=3,
    )
    values.update(overrides)
    return TrainSchedule(**values)


def small_config(vocab, **overrides):
    values = dict(num_layers=1, hidden_size=16, num_heads=2, ffn_size=32, vocab_size=len(vocab), max_positions=32)
    values.update(overrides)
    return ModelConfig(**values)


def test_base_schedule_values():
    base = TrainSchedule.preset("base")
    assert lr_at(base, 0) == 0.0
    assert lr_at(base, 10_000) == pytest.approx(4e-4, rel=1e-12)
    assert lr_at(base, 55_000) == pytest.approx(2e-4, rel=1e-12)
    assert lr_at(base, 100_000) == 0.0
    assert TrainSchedule.preset("large").peak_lr == 1.5e-4


def test_schedule_closed_form_at_random_steps():
    base = TrainSchedule.preset("base")
    for step in np.random.default_rng(0).integers(1, 100_000, 10):
        step = int(step)
        if step < 10_000:
            expected = 4e-4 * step / 10_000
        else:
            expected = 4e-4 * (100_000 - step) / 90_000
        assert lr_at(base, step) == pytest.approx(expected, rel=1e-12)


def test_schedule_shape():
    schedule = TrainSchedule(total_updates=1000, warmup_updates=100, peak_lr=1e-3, end_lr=1e-5, power=2.0)
    values = [lr_at(schedule, s) for s in range(1001)]
    assert values[100] == pytest.approx(1e-3)
    assert values.index(max(values)) == 100
    assert min(values) >= 0.0
    assert values[-1] == pytest.approx(1e-5)
    assert abs(values[101] - values[99]) < 3e-5


def test_schedule_agrees_with_transformers():
    schedule = TrainSchedule(total_updates=500, warmup_updates=50, peak_lr=4e-4, end_lr=1e-7, power=1.0)
    optimizer = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=schedule.peak_lr)
    reference = get_polynomial_decay_schedule_with_warmup(optimizer, 50, 500, lr_end=1e-7, power=1.0)
    for step in range(500):
        assert lr_at(schedule, step) == pytest.approx(reference.get_last_lr()[0], rel=1e-9, abs=1e-15)
        optimizer.step()
        reference.step()


def test_schedule_out_of_range():
    with pytest.raises(ScheduleError):
        lr_at(TrainSchedule.preset("base"), 100_001)
    with pytest.raises(ScheduleError):
        lr_at(TrainSchedule.preset("base"), -1)


def test_masking_rate_and_labels(toy_vocab):
    blocks = random_blocks(toy_vocab, 100, 102)
    masked = apply_dynamic_masking(blocks, 0.15, seed=1, step=1, vocab=toy_vocab)
    selected = masked.labels != IGNORE_INDEX
    assert int(content_tokens(blocks)) == 10_000
    assert 0.13 <= int(selected.sum()) / 10_000 <= 0.17
    assert torch.equal(masked.labels[selected], blocks.token_ids[selected])
    unchanged = ~selected
    assert torch.equal(masked.token_ids[unchanged], blocks.token_ids[unchanged])

    replaced = masked.token_ids[selected]
    share_mask = float((replaced == toy_vocab.mask_id).float().mean())
    assert 0.7 < share_mask < 0.9
    special = torch.tensor(sorted(toy_vocab.special_ids))
    assert not torch.isin(blocks.token_ids[selected], special).any()


def test_masking_is_deterministic_and_dynamic(toy_vocab):
    blocks = random_blocks(toy_vocab, 20, 50)
    first = apply_dynamic_masking(blocks, 0.15, 7, 3, toy_vocab)
    again = apply_dynamic_masking(blocks, 0.15, 7, 3, toy_vocab)
    later = apply_dynamic_masking(blocks, 0.15, 7, 4, toy_vocab)
    assert torch.equal(first.token_ids, again.token_ids) and torch.equal(first.labels, again.labels)
    assert not torch.equal(first.labels, later.labels)


def test_only_special_tokens_stay_unmasked(toy_vocab):
    ids = torch.tensor([[toy_vocab.bos_id, toy_vocab.eos_id, toy_vocab.pad_id]])
    batch = Batch(ids, torch.tensor([[True, True, False]]))
    masked = apply_dynamic_masking(batch, 0.9, 1, 1, toy_vocab)
    assert torch.equal(masked.token_ids, ids)
    assert (masked.labels == IGNORE_INDEX).all()
    with pytest.raises(NoMaskedPositions):
        mlm_loss(torch.zeros(1, 3, len(toy_vocab)), masked.labels)


def test_invalid_mask_probability(toy_vocab):
    with pytest.raises(ConfigurationError):
        apply_dynamic_masking(random_blocks(toy_vocab, 1, 10), 0.0, 1, 1, toy_vocab)


def test_uniform_logits_give_log_vocab():
    labels = torch.tensor([[IGNORE_INDEX, 3, 17, IGNORE_INDEX]])
    loss, count = mlm_loss(torch.zeros(1, 4, 50), labels)
    assert count == 2
    assert float(loss) == pytest.approx(math.log(50))
    assert math.exp(float(loss)) == pytest.approx(50)


def test_confident_logits_give_unit_perplexity():
    labels = torch.tensor([[2, 5]])
    logits = torch.full((1, 2, 10), -50.0)
    logits[0, 0, 2] = logits[0, 1, 5] = 50.0
    loss, _ = mlm_loss(logits, labels)
    assert math.exp(float(loss)) == pytest.approx(1.0)


def test_ignored_positions_do_not_count():
    logits = torch.randn(1, 4, 20, generator=torch.Generator().manual_seed(0))
    labels = torch.tensor([[IGNORE_INDEX, 4, IGNORE_INDEX, 9]])
    loss, _ = mlm_loss(logits, labels)
    other, _ = mlm_loss(logits.clone().index_fill_(1, torch.tensor([0, 2]), 3.0), labels)
    assert torch.equal(loss, other)


def test_packing_accounts_for_every_token(toy_vocab):
    stream = list(range(4, 4 + 250))
    blocks = pack_sequences(stream, 32, toy_vocab)
    assert blocks.token_ids.shape == (9, 32)
    assert content_tokens(blocks) == 250
    recovered = []
    for row, mask in zip(blocks.token_ids, blocks.attention_mask):
        kept = row[mask].tolist()
        assert kept[0] == toy_vocab.bos_id and kept[-1] == toy_vocab.eos_id
        recovered.extend(kept[1:-1])
    assert recovered == stream
    assert (blocks.token_ids[~blocks.attention_mask] == toy_vocab.pad_id).all()


@pytest.mark.parametrize("size", [512, 4096])
def test_initial_perplexity_is_vocabulary_scale(size):
    vocab = make_vocab(size)
    config = ModelConfig.preset("toy", vocab_size=size, max_positions=64)
    schedule = small_schedule(seq_len=64, batch_sequences=16, micro_batch=8)
    blocks = random_blocks(vocab, 40, 64)
    trainer = Pretrainer(config, schedule, vocab, blocks, random_blocks(vocab, 4, 64, seed=1))
    perplexity = trainer.update(trainer.epoch_order(1)[:16])
    assert 0.5 * size <= perplexity <= 2 * size


def test_resume_continues_identically(tmp_path, toy_vocab):
    config = small_config(toy_vocab, dropout=0.1)
    schedule = small_schedule()
    train_blocks = random_blocks(toy_vocab, 24, 32, seed=0)
    valid_blocks = random_blocks(toy_vocab, 4, 32, seed=1)

    full = Pretrainer(config, schedule, toy_vocab, train_blocks, valid_blocks)
    assert full.updates_per_epoch == 3
    _, full_log = full.run(tmp_path / "full")

    resumed = Pretrainer(config, schedule, toy_vocab, train_blocks, valid_blocks)
    resumed.resume(load_checkpoint(tmp_path / "full" / "epoch-1.ckpt"))
    assert resumed.step == 3 and resumed.epoch == 1
    final, resumed_log = resumed.run(tmp_path / "resumed")

    assert resumed_log.train_points == full_log.train_points
    assert resumed_log.valid_points == full_log.valid_points
    reference = load_checkpoint(tmp_path / "full" / "final.ckpt")
    for name, array in reference.tensors.items():
        assert np.array_equal(final.tensors[name], array), name


def test_run_writes_outputs(tmp_path, toy_vocab):
    trainer = Pretrainer(
        small_config(toy_vocab), small_schedule(total_updates=6), toy_vocab,
        random_blocks(toy_vocab, 16, 32), random_blocks(toy_vocab, 4, 32, seed=1),
    )
    _, log = trainer.run(tmp_path)
    assert [e for e, _ in log.valid_points] == [0, 1, 2, 3]
    assert [s for s, _ in log.train_points] == list(range(1, 7))
    for name in ("epoch-1.ckpt", "epoch-3.ckpt", "best.ckpt", "final.ckpt", TRAIN_CSV, VALID_CSV, "perplexity.svg"):
        assert (tmp_path / name).exists(), name
    assert (tmp_path / TRAIN_CSV).read_text().splitlines()[0] == "step,perplexity"
    assert load_checkpoint(tmp_path / "final.ckpt").step == 6


def test_sequence_length_must_fit_positions(toy_vocab):
    with pytest.raises(ConfigurationError):
        Pretrainer(
            small_config(toy_vocab, max_positions=16), small_schedule(), toy_vocab,
            random_blocks(toy_vocab, 4, 32), random_blocks(toy_vocab, 4, 32),
        )


def test_vocabulary_must_match_model(toy_vocab):
    with pytest.raises(ConfigurationError):
        Pretrainer(
            small_config(toy_vocab, vocab_size=len(toy_vocab) + 1), small_schedule(), toy_vocab,
            random_blocks(toy_vocab, 4, 32), random_blocks(toy_vocab, 4, 32),
        )


def grammar_manifests(tmp_path, n_docs, seed=1):
    texts = corpus_documents(n_docs, 8, seed)
    docs = [Document(id=str(i), text=t.encode("utf-8")) for i, t in enumerate(texts)]
    cut = n_docs // 20
    return (
        shuffle_and_shard(docs[cut:], seed, 1 << 20, tmp_path / "train"),
        shuffle_and_shard(docs[:cut], seed, 1 << 20, tmp_path / "valid"),
    )


@pytest.mark.slow
def test_toy_pretraining_converges(tmp_path):
    from core.bpe import train_vocab
    from core.corpus import read_shards

    train_manifest, valid_manifest = grammar_manifests(tmp_path, 6000)
    vocab = train_vocab(read_shards(train_manifest), 512)
    config = ModelConfig.preset("toy", vocab_size=len(vocab), dropout=0.0, attention_dropout=0.0)
    schedule = TrainSchedule.preset("desk")
    _, log = train(config, schedule, train_manifest, valid_manifest, vocab, tmp_path / "run")

    initial = log.valid_points[0][1]
    assert log.valid_points[-1][1] < 0.1 * initial
    assert all(p <= log.valid_points[1][1] * 1.05 for _, p in log.valid_points[1:])
    points = [p for _, p in log.train_points]
    window = max(1, len(points) // 10)
    assert np.mean(points[-window:]) < np.mean(points[:window])
