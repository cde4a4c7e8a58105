"""Checkpoint codec.

Layout: ``MAGIC`` (8 bytes), format version (uint32 LE), header length (uint64 LE),
a UTF-8 JSON header (config, step, RNG state, tensor directory with names, shapes and
byte offsets), then raw little-endian float32 blobs in directory order.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch
from torch import nn

from core.config import ModelConfig
from core.encoder.model import HeadSpec, load_named_tensors, named_tensors, parameter_manifest
from core.errors import CheckpointError, StructuralError
from core.types import TaskKind
from core.utils import PathLike, convert_base64_to_bytes, convert_bytes_to_base64

logger = logging.getLogger(__name__)

MAGIC = b"SNDBCKPT"
FORMAT_VERSION = 1
OPTIMIZER_PREFIX = "optimizer."


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    step: int = 0
    rng_state: bytes = b""
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    head: Optional[HeadSpec] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.step < 0:
            raise CheckpointError(f"Checkpoint step must be non-negative, got {self.step}")

    def validate(self) -> None:
        manifest = parameter_manifest(self.config, self.head)
        for name, shape in manifest.items():
            if name not in self.tensors:
                raise StructuralError(f"Checkpoint is missing tensor {name}")
            if tuple(self.tensors[name].shape) != tuple(shape):
                raise StructuralError(f"Tensor {name} has shape {tuple(self.tensors[name].shape)}, expected {tuple(shape)}")
        for name in self.tensors:
            if name not in manifest:
                raise StructuralError(f"Checkpoint has unexpected tensor {name}")


def _float32(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().to("cpu", torch.float32).numpy().copy()


def capture(
    model: nn.Module,
    config: ModelConfig,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    head: Optional[HeadSpec] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Checkpoint:
    "Snapshot a model (and optionally its AdamW moments and the torch RNG) into a Checkpoint"
    tensors = {name: _float32(t) for name, t in named_tensors(model).items()}
    optimizer_state: Dict[str, np.ndarray] = {}
    optimizer_step = 0
    if optimizer is not None:
        for name, param in _named_parameters(model).items():
            state = optimizer.state.get(param)
            if not state:
                continue
            optimizer_state[f"exp_avg.{name}"] = _float32(state["exp_avg"])
            optimizer_state[f"exp_avg_sq.{name}"] = _float32(state["exp_avg_sq"])
            optimizer_step = int(float(state["step"]))
    return Checkpoint(
        config=config,
        tensors=tensors,
        step=step,
        rng_state=torch.get_rng_state().numpy().tobytes(),
        optimizer_state=optimizer_state,
        optimizer_step=optimizer_step,
        head=head,
        extra=dict(extra or {}),
    )


def _named_parameters(model: nn.Module) -> Dict[str, nn.Parameter]:
    params = {}
    for name, param in model.named_parameters():
        if name.startswith("encoder."):
            name = name[len("encoder."):]
        params[name] = param
    return params


def restore_model(checkpoint: Checkpoint, model: nn.Module) -> None:
    manifest = parameter_manifest(checkpoint.config, checkpoint.head)
    tensors = {name: torch.from_numpy(array.copy()) for name, array in checkpoint.tensors.items()}
    load_named_tensors(model, tensors, manifest)


def restore_optimizer(checkpoint: Checkpoint, model: nn.Module, optimizer: torch.optim.Optimizer) -> None:
    for name, param in _named_parameters(model).items():
        key = f"exp_avg.{name}"
        if key not in checkpoint.optimizer_state:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(checkpoint.optimizer_step), dtype=torch.float32),
            "exp_avg": torch.from_numpy(checkpoint.optimizer_state[key].copy()).to(param.device),
            "exp_avg_sq": torch.from_numpy(checkpoint.optimizer_state[f"exp_avg_sq.{name}"].copy()).to(param.device),
        }


def restore_rng(checkpoint: Checkpoint) -> None:
    if checkpoint.rng_state:
        torch.set_rng_state(torch.from_numpy(np.frombuffer(checkpoint.rng_state, dtype=np.uint8).copy()))


def save_checkpoint(checkpoint: Checkpoint, path: PathLike) -> None:
    checkpoint.validate()
    path = Path(path)
    directory: List[Dict[str, Any]] = []
    blobs: List[bytes] = []
    offset = 0
    sections = [("", checkpoint.tensors), (OPTIMIZER_PREFIX, checkpoint.optimizer_state)]
    for prefix, tensors in sections:
        for name, array in tensors.items():
            blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
            directory.append({"name": prefix + name, "shape": list(array.shape), "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)

    header = {
        "config": checkpoint.config.model_dump(mode="json"),
        "step": checkpoint.step,
        "optimizer_step": checkpoint.optimizer_step,
        "rng_state": convert_bytes_to_base64(checkpoint.rng_state),
        "head": {"kind": checkpoint.head.kind.value, "n_labels": checkpoint.head.n_labels} if checkpoint.head else None,
        "extra": checkpoint.extra,
        "tensors": directory,
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", FORMAT_VERSION))
            f.write(struct.pack("<Q", len(encoded)))
            f.write(encoded)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path} at step {checkpoint.step}")


def load_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

    start = len(MAGIC) + 12
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    if len(data) < start:
        raise CheckpointError(f"{path} is truncated before its header")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {FORMAT_VERSION}")
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC) + 4)
    if start + header_len > len(data):
        raise CheckpointError(f"{path} is truncated inside its header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has a corrupt header: {e}") from e
    if not isinstance(header, dict) or "tensors" not in header or "config" not in header:
        raise CheckpointError(f"{path} has a header without config or tensor directory")
    blob_start = start + header_len

    tensors: Dict[str, np.ndarray] = {}
    optimizer_state: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        begin = blob_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"{path} is truncated inside tensor {entry['name']}")
        array = np.frombuffer(data[begin:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        if entry["name"].startswith(OPTIMIZER_PREFIX):
            optimizer_state[entry["name"][len(OPTIMIZER_PREFIX):]] = array
        else:
            tensors[entry["name"]] = array

    head = header.get("head")
    checkpoint = Checkpoint(
        config=ModelConfig.model_validate(header["config"]),
        tensors=tensors,
        step=int(header["step"]),
        rng_state=convert_base64_to_bytes(header.get("rng_state", "")),
        optimizer_state=optimizer_state,
        optimizer_step=int(header.get("optimizer_step", 0)),
        head=HeadSpec(TaskKind(head["kind"]), int(head["n_labels"])) if head else None,
        extra=header.get("extra", {}),
    )
    checkpoint.validate()
    return checkpoint


def encoder_only(checkpoint: Checkpoint) -> Checkpoint:
    "Drop task-head tensors, e.g. to fine-tune from a fine-tuned checkpoint"
    tensors = {k: v for k, v in checkpoint.tensors.items() if not k.startswith("head.")}
    return Checkpoint(config=checkpoint.config, tensors=tensors, step=checkpoint.step, extra=dict(checkpoint.extra))
