import logging
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from core.config import ModelConfig
from core.errors import InputError, StructuralError
from core.types import TaskKind

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


@dataclass
class Batch:
    token_ids: torch.Tensor
    attention_mask: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def to(self, device: torch.device) -> "Batch":
        labels = self.labels.to(device) if self.labels is not None else None
        return Batch(self.token_ids.to(device), self.attention_mask.to(device), labels)


@dataclass(frozen=True)
class HeadSpec:
    kind: TaskKind
    n_labels: int


def parameter_manifest(config: ModelConfig, head: Optional[HeadSpec] = None) -> "OrderedDict[str, Shape]":
    "Every tensor name and shape implied by the config, in state_dict order"
    H, F_, V = config.hidden_size, config.ffn_size, config.vocab_size
    manifest: "OrderedDict[str, Shape]" = OrderedDict()
    manifest["embed_tokens.weight"] = (V, H)
    manifest["embed_positions.weight"] = (config.position_rows, H)
    manifest["emb_layer_norm.weight"] = (H,)
    manifest["emb_layer_norm.bias"] = (H,)
    for i in range(config.num_layers):
        prefix = f"layers.{i}."
        for proj in ("k_proj", "v_proj", "q_proj", "out_proj"):
            manifest[f"{prefix}self_attn.{proj}.weight"] = (H, H)
            manifest[f"{prefix}self_attn.{proj}.bias"] = (H,)
        manifest[f"{prefix}self_attn_layer_norm.weight"] = (H,)
        manifest[f"{prefix}self_attn_layer_norm.bias"] = (H,)
        manifest[f"{prefix}fc1.weight"] = (F_, H)
        manifest[f"{prefix}fc1.bias"] = (F_,)
        manifest[f"{prefix}fc2.weight"] = (H, F_)
        manifest[f"{prefix}fc2.bias"] = (H,)
        manifest[f"{prefix}final_layer_norm.weight"] = (H,)
        manifest[f"{prefix}final_layer_norm.bias"] = (H,)
    manifest["lm_head.bias"] = (V,)
    manifest["lm_head.dense.weight"] = (H, H)
    manifest["lm_head.dense.bias"] = (H,)
    manifest["lm_head.layer_norm.weight"] = (H,)
    manifest["lm_head.layer_norm.bias"] = (H,)

    if head is not None:
        if head.kind == TaskKind.sequence_classification:
            manifest["head.dense.weight"] = (H, H)
            manifest["head.dense.bias"] = (H,)
        manifest["head.out_proj.weight"] = (head.n_labels, H)
        manifest["head.out_proj.bias"] = (head.n_labels,)
    return manifest


def count_parameters(config: ModelConfig) -> int:
    "Encoder + tied MLM head; task heads are not counted"
    return sum(math.prod(shape) for shape in parameter_manifest(config).values())


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        module.weight.data.normal_(mean=0.0, std=0.02)
        if module.bias is not None:
            module.bias.data.zero_()
    elif isinstance(module, nn.Embedding):
        module.weight.data.normal_(mean=0.0, std=0.02)
        if module.padding_idx is not None:
            module.weight.data[module.padding_idx].zero_()


class SelfAttention(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        H = config.hidden_size
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.k_proj = nn.Linear(H, H)
        self.v_proj = nn.Linear(H, H)
        self.q_proj = nn.Linear(H, H)
        self.out_proj = nn.Linear(H, H)
        self.dropout = nn.Dropout(config.attention_dropout)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        n, t, _ = x.shape
        return x.view(n, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, attention_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        n, t, h = x.shape
        q = self._split(self.q_proj(x)) / math.sqrt(self.head_dim)
        k = self._split(self.k_proj(x))
        v = self._split(self.v_proj(x))

        scores = torch.matmul(q, k.transpose(-1, -2))
        # finite fill keeps fully padded rows free of NaNs
        scores = scores.masked_fill(~attention_mask[:, None, None, :], torch.finfo(scores.dtype).min)
        probs = F.softmax(scores, dim=-1)
        context = torch.matmul(self.dropout(probs), v)
        context = context.transpose(1, 2).reshape(n, t, h)
        return self.out_proj(context), probs


class EncoderLayer(nn.Module):
    "Post-layer-norm transformer block"

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.self_attn = SelfAttention(config)
        self.self_attn_layer_norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)
        self.fc1 = nn.Linear(config.hidden_size, config.ffn_size)
        self.fc2 = nn.Linear(config.ffn_size, config.hidden_size)
        self.final_layer_norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, attention_mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        attended, probs = self.self_attn(x, attention_mask)
        x = self.self_attn_layer_norm(x + self.dropout(attended))
        hidden = self.fc2(self.dropout(F.gelu(self.fc1(x))))
        x = self.final_layer_norm(x + self.dropout(hidden))
        return x, probs


class LMHead(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(config.vocab_size))
        self.dense = nn.Linear(config.hidden_size, config.hidden_size)
        self.layer_norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)

    def forward(self, hidden: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        x = self.layer_norm(F.gelu(self.dense(hidden)))
        return F.linear(x, embedding) + self.bias


class RobertaEncoder(nn.Module):
    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.embed_tokens = nn.Embedding(config.vocab_size, config.hidden_size, padding_idx=config.pad_id)
        self.embed_positions = nn.Embedding(config.position_rows, config.hidden_size, padding_idx=config.pad_id)
        self.emb_layer_norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)
        self.layers = nn.ModuleList([EncoderLayer(config) for _ in range(config.num_layers)])
        self.lm_head = LMHead(config)
        self.dropout = nn.Dropout(config.dropout)
        self.apply(init_weights)

    def check_batch(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> None:
        if token_ids.dim() != 2 or token_ids.shape != attention_mask.shape:
            raise InputError(f"token_ids {tuple(token_ids.shape)} and attention_mask {tuple(attention_mask.shape)} must be equal 2-d shapes")
        if token_ids.shape[1] > self.config.max_positions:
            raise InputError(f"Sequence length {token_ids.shape[1]} exceeds max_positions {self.config.max_positions}")
        if token_ids.numel() and (int(token_ids.max()) >= self.config.vocab_size or int(token_ids.min()) < 0):
            raise InputError(f"Token id {int(token_ids.max())} outside vocabulary of {self.config.vocab_size}")

    def positions(self, attention_mask: torch.Tensor) -> torch.Tensor:
        mask = attention_mask.long()
        return torch.cumsum(mask, dim=1) * mask + self.config.pad_id

    def forward(
        self, token_ids: torch.Tensor, attention_mask: torch.Tensor, return_attention: bool = False
    ):
        self.check_batch(token_ids, attention_mask)
        attention_mask = attention_mask.bool()
        x = self.embed_tokens(token_ids) + self.embed_positions(self.positions(attention_mask))
        x = self.dropout(self.emb_layer_norm(x))

        attentions: List[torch.Tensor] = []
        for layer in self.layers:
            x, probs = layer(x, attention_mask)
            attentions.append(probs)
        if return_attention:
            return x, attentions
        return x

    def mlm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.lm_head(hidden, self.embed_tokens.weight)


class TokenClassificationHead(nn.Module):
    def __init__(self, config: ModelConfig, n_tags: int) -> None:
        super().__init__()
        if n_tags < 2:
            raise StructuralError(f"A tagging head needs at least 2 tags, got {n_tags}")
        self.dropout = nn.Dropout(config.dropout)
        self.out_proj = nn.Linear(config.hidden_size, n_tags)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.out_proj(self.dropout(hidden))


class SequenceClassificationHead(nn.Module):
    "Reads the <s> position: dense + tanh, then a linear map to the classes"

    def __init__(self, config: ModelConfig, n_classes: int) -> None:
        super().__init__()
        if n_classes < 2:
            raise StructuralError(f"A classification head needs at least 2 classes, got {n_classes}")
        self.dense = nn.Linear(config.hidden_size, config.hidden_size)
        self.dropout = nn.Dropout(config.dropout)
        self.out_proj = nn.Linear(config.hidden_size, n_classes)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        x = self.dropout(hidden[:, 0, :])
        x = self.dropout(torch.tanh(self.dense(x)))
        return self.out_proj(x)


class TaskModel(nn.Module):
    def __init__(self, encoder: RobertaEncoder, head: HeadSpec) -> None:
        super().__init__()
        self.encoder = encoder
        self.spec = head
        if head.kind == TaskKind.sequence_classification:
            self.head: nn.Module = SequenceClassificationHead(encoder.config, head.n_labels)
        else:
            self.head = TokenClassificationHead(encoder.config, head.n_labels)
        self.head.apply(init_weights)

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        return self.head(self.encoder(token_ids, attention_mask))


def forward(model: RobertaEncoder, batch: Batch) -> torch.Tensor:
    return model(batch.token_ids, batch.attention_mask)


def mlm_logits(model: RobertaEncoder, hidden: torch.Tensor) -> torch.Tensor:
    return model.mlm_logits(hidden)


def head_token_classify(head: TokenClassificationHead, hidden: torch.Tensor) -> torch.Tensor:
    return head(hidden)


def head_sequence_classify(head: SequenceClassificationHead, hidden: torch.Tensor) -> torch.Tensor:
    return head(hidden)


def named_tensors(model: nn.Module) -> Dict[str, torch.Tensor]:
    "state_dict with task-model prefixes folded to manifest names"
    tensors: Dict[str, torch.Tensor] = {}
    for name, tensor in model.state_dict().items():
        if name.startswith("encoder."):
            name = name[len("encoder."):]
        tensors[name] = tensor
    return tensors


def load_named_tensors(model: nn.Module, tensors: Dict[str, torch.Tensor], manifest: Dict[str, Shape]) -> None:
    missing = [name for name in manifest if name not in tensors]
    extra = [name for name in tensors if name not in manifest]
    if missing:
        raise StructuralError(f"Missing tensor {missing[0]} ({len(missing)} missing)")
    if extra:
        raise StructuralError(f"Unexpected tensor {extra[0]} ({len(extra)} extra)")
    for name, shape in manifest.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise StructuralError(f"Tensor {name} has shape {tuple(tensors[name].shape)}, expected {tuple(shape)}")

    state = {}
    prefixed = isinstance(model, TaskModel)
    for name, tensor in tensors.items():
        key = name if not prefixed or name.startswith("head.") else f"encoder.{name}"
        state[key] = tensor
    model.load_state_dict(state, strict=True)
