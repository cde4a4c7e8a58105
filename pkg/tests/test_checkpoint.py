import struct

import numpy as np
import pytest
import torch

from core.encoder.checkpoint import (
    MAGIC,
    Checkpoint,
    capture,
    encoder_only,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from core.encoder.model import HeadSpec, RobertaEncoder, TaskModel
from core.errors import CheckpointError, StructuralError
from core.types import TaskKind


@pytest.fixture
def batch():
    ids = torch.tensor([[0, 10, 11, 12, 2], [0, 13, 2, 1, 1]])
    return ids, ids != 1


def test_roundtrip_reproduces_logits_bitwise(tmp_path, toy_model, toy_config, batch):
    path = tmp_path / "model.ckpt"
    save_checkpoint(capture(toy_model, toy_config, step=7, extra={"epoch": 1}), path)
    loaded = load_checkpoint(path)
    assert loaded.step == 7
    assert loaded.extra == {"epoch": 1}
    assert loaded.config == toy_config

    restored = RobertaEncoder(toy_config).eval()
    restore_model(loaded, restored)
    ids, mask = batch
    assert torch.equal(restored.mlm_logits(restored(ids, mask)), toy_model.mlm_logits(toy_model(ids, mask)))


def test_optimizer_moments_survive(tmp_path, toy_model, toy_config, batch):
    optimizer = torch.optim.AdamW(toy_model.parameters(), lr=1e-3)
    ids, mask = batch
    toy_model.mlm_logits(toy_model(ids, mask)).sum().backward()
    optimizer.step()

    path = tmp_path / "model.ckpt"
    save_checkpoint(capture(toy_model, toy_config, step=1, optimizer=optimizer), path)
    loaded = load_checkpoint(path)
    assert loaded.optimizer_step == 1

    model = RobertaEncoder(toy_config)
    restore_model(loaded, model)
    fresh = torch.optim.AdamW(model.parameters(), lr=1e-3)
    restore_optimizer(loaded, model, fresh)
    before = dict(toy_model.named_parameters())
    for name, param in model.named_parameters():
        assert torch.equal(fresh.state[param]["exp_avg"], optimizer.state[before[name]]["exp_avg"])


def test_task_head_roundtrip(tmp_path, toy_model, toy_config):
    task = TaskModel(toy_model, HeadSpec(TaskKind.token_tagging, 4))
    path = tmp_path / "task.ckpt"
    save_checkpoint(capture(task, toy_config, head=task.spec), path)
    loaded = load_checkpoint(path)
    assert loaded.head == HeadSpec(TaskKind.token_tagging, 4)
    assert "head.out_proj.weight" in loaded.tensors

    copy = TaskModel(RobertaEncoder(toy_config), loaded.head)
    restore_model(loaded, copy)
    assert torch.equal(copy.head.out_proj.weight, task.head.out_proj.weight)
    assert not any(name.startswith("head.") for name in encoder_only(loaded).tensors)


def test_blobs_are_little_endian_float32(tmp_path, toy_model, toy_config):
    path = tmp_path / "model.ckpt"
    checkpoint = capture(toy_model, toy_config)
    save_checkpoint(checkpoint, path)
    data = path.read_bytes()
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC) + 4)
    blobs = len(data) - len(MAGIC) - 12 - header_len
    assert blobs == 4 * sum(a.size for a in checkpoint.tensors.values())


def test_truncated_file(tmp_path, toy_model, toy_config):
    path = tmp_path / "model.ckpt"
    save_checkpoint(capture(toy_model, toy_config), path)
    data = path.read_bytes()
    for cut in (10, len(MAGIC) + 20, len(data) - 3):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\0" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_missing_and_misshapen_tensors(toy_model, toy_config, tmp_path):
    checkpoint = capture(toy_model, toy_config)
    missing = dict(checkpoint.tensors)
    missing.pop("lm_head.bias")
    with pytest.raises(StructuralError, match="lm_head.bias"):
        save_checkpoint(Checkpoint(toy_config, missing), tmp_path / "a.ckpt")

    misshapen = dict(checkpoint.tensors)
    misshapen["emb_layer_norm.weight"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(StructuralError, match="emb_layer_norm.weight"):
        Checkpoint(toy_config, misshapen).validate()

    extra = dict(checkpoint.tensors, stray=np.zeros(1, dtype=np.float32))
    with pytest.raises(StructuralError, match="stray"):
        Checkpoint(toy_config, extra).validate()


def test_negative_step():
    with pytest.raises(CheckpointError):
        Checkpoint(config=None, tensors={}, step=-1)  # type: ignore[arg-type]


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.ckpt")
