import logging
import math
import shutil
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from core.bpe import BpeVocab
from core.config import ModelConfig, TrainSchedule
from core.corpus import read_shards
from core.encoder.checkpoint import (
    Checkpoint,
    capture,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    restore_rng,
    save_checkpoint,
)
from core.encoder.model import Batch, RobertaEncoder
from core.errors import ConfigurationError, NoMaskedPositions, NonFiniteLossError, ScheduleError
from core.types import CorpusManifest, PerplexityLog
from core.utils import PathLike, seed_everything

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100
TRAIN_STREAM = 0
VALID_STREAM = 1


def lr_at(schedule: TrainSchedule, step: int) -> float:
    "Linear warmup to peak_lr, then polynomial decay reaching end_lr at total_updates"
    if step < 0 or step > schedule.total_updates:
        raise ScheduleError(f"Step {step} outside [0, {schedule.total_updates}]")
    if step < schedule.warmup_updates:
        return schedule.peak_lr * step / schedule.warmup_updates
    remaining = (schedule.total_updates - step) / (schedule.total_updates - schedule.warmup_updates)
    return (schedule.peak_lr - schedule.end_lr) * remaining**schedule.power + schedule.end_lr


def masking_generator(seed: int, step: int, stream: int = TRAIN_STREAM) -> torch.Generator:
    state = np.random.SeedSequence([seed, step, stream]).generate_state(2, dtype=np.uint32)
    return torch.Generator().manual_seed(int(state[0]) << 32 | int(state[1]))


def apply_dynamic_masking(
    batch: Batch,
    mask_prob: float,
    seed: int,
    step: int,
    vocab: BpeVocab,
    stream: int = TRAIN_STREAM,
) -> Batch:
    """Select each non-special position with probability mask_prob; of those, 80% become
    <mask>, 10% a random regular token and 10% stay unchanged. Labels hold the original
    id at selected positions and IGNORE_INDEX elsewhere."""
    if not 0.0 < mask_prob < 1.0:
        raise ConfigurationError(f"mask_prob must lie in (0, 1), got {mask_prob}")

    generator = masking_generator(seed, step, stream)
    ids = batch.token_ids
    special = torch.tensor(sorted(vocab.special_ids), dtype=ids.dtype)
    candidates = batch.attention_mask.bool() & ~torch.isin(ids, special)

    selected = candidates & (torch.rand(ids.shape, generator=generator) < mask_prob)
    decide = torch.rand(ids.shape, generator=generator)
    random_ids = torch.randint(len(vocab.specials.leading()), vocab.mask_id, ids.shape, generator=generator)

    masked = ids.clone()
    masked[selected & (decide < 0.8)] = vocab.mask_id
    swap = selected & (decide >= 0.8) & (decide < 0.9)
    masked[swap] = random_ids[swap]
    labels = torch.where(selected, ids, torch.full_like(ids, IGNORE_INDEX))
    return Batch(masked, batch.attention_mask, labels)


def mlm_loss(logits: torch.Tensor, labels: torch.Tensor, reduction: str = "mean") -> Tuple[torch.Tensor, int]:
    "Cross-entropy over selected positions only; returns the loss and the selected count"
    count = int((labels != IGNORE_INDEX).sum())
    if count == 0:
        raise NoMaskedPositions("No masked positions in batch")
    total = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]).float(), labels.reshape(-1), ignore_index=IGNORE_INDEX, reduction="sum"
    )
    if reduction == "sum":
        return total, count
    return total / count, count


def encode_manifest(vocab: BpeVocab, manifest: CorpusManifest, show_progress: bool = False) -> List[int]:
    stream: List[int] = []
    for doc in tqdm(read_shards(manifest), desc="Tokenizing", total=manifest.documents or None, disable=not show_progress):
        stream.extend(vocab.encode(doc.text).ids)
    return stream


def pack_sequences(stream: Sequence[int], seq_len: int, vocab: BpeVocab) -> Batch:
    """Chop a contiguous token stream into [<s>] + chunk + [</s>] blocks of seq_len.

    Document boundaries are not respected; the final short block is padded.
    """
    content = seq_len - 2
    if content < 1:
        raise ConfigurationError(f"seq_len {seq_len} leaves no room for content")
    if not stream:
        raise ConfigurationError("Cannot pack an empty token stream")

    n_blocks = math.ceil(len(stream) / content)
    token_ids = torch.full((n_blocks, seq_len), vocab.pad_id, dtype=torch.long)
    attention_mask = torch.zeros((n_blocks, seq_len), dtype=torch.bool)
    data = torch.tensor(stream, dtype=torch.long)
    for i in range(n_blocks):
        chunk = data[i * content:(i + 1) * content]
        n = chunk.numel()
        token_ids[i, 0] = vocab.bos_id
        token_ids[i, 1:n + 1] = chunk
        token_ids[i, n + 1] = vocab.eos_id
        attention_mask[i, :n + 2] = True
    return Batch(token_ids, attention_mask)


def content_tokens(blocks: Batch) -> int:
    "Number of corpus tokens held by packed blocks (excluding <s>, </s> and padding)"
    return int(blocks.attention_mask.sum()) - 2 * blocks.token_ids.shape[0]


class Pretrainer:
    """Masked-LM pretraining with gradient accumulation, warmup + polynomial decay,
    per-step training perplexity and per-epoch validation perplexity."""

    def __init__(
        self,
        config: ModelConfig,
        schedule: TrainSchedule,
        vocab: BpeVocab,
        train_blocks: Batch,
        valid_blocks: Batch,
        device: str = "cpu",
        show_progress: bool = False,
    ) -> None:
        config.check_tokenizer(len(vocab))
        if schedule.seq_len > config.max_positions:
            raise ConfigurationError(f"seq_len {schedule.seq_len} exceeds max_positions {config.max_positions}")

        self.config = config
        self.schedule = schedule
        self.vocab = vocab
        self.train_blocks = train_blocks
        self.valid_blocks = valid_blocks
        self.device = torch.device(device)
        self.show_progress = show_progress

        seed_everything(schedule.seed)
        self.model = RobertaEncoder(config).to(self.device)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=0.0,
            betas=schedule.betas,
            eps=schedule.eps,
            weight_decay=schedule.weight_decay,
        )
        self.step = 0
        self.epoch = 0
        self.log = PerplexityLog()
        self.best_valid = math.inf

    @property
    def updates_per_epoch(self) -> int:
        return math.ceil(self.train_blocks.token_ids.shape[0] / self.schedule.batch_sequences)

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.schedule.seed, epoch]).permutation(self.train_blocks.token_ids.shape[0])

    def _select(self, blocks: Batch, index: Sequence[int]) -> Batch:
        index_t = torch.as_tensor(np.asarray(index), dtype=torch.long)
        return Batch(blocks.token_ids[index_t], blocks.attention_mask[index_t])

    def update(self, index: Sequence[int]) -> Optional[float]:
        "One optimizer update over the given blocks; returns training perplexity or None if skipped"
        self.step += 1
        batch = apply_dynamic_masking(
            self._select(self.train_blocks, index), self.schedule.mask_prob, self.schedule.seed, self.step, self.vocab
        )
        total = int((batch.labels != IGNORE_INDEX).sum())
        if total == 0:
            logger.warning(f"Step {self.step}: no masked positions, update skipped")
            return None

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        nll = 0.0
        size = self.schedule.micro_batch
        for start in range(0, batch.token_ids.shape[0], size):
            micro = Batch(
                batch.token_ids[start:start + size],
                batch.attention_mask[start:start + size],
                batch.labels[start:start + size],
            ).to(self.device)
            if int((micro.labels != IGNORE_INDEX).sum()) == 0:
                continue
            logits = self.model.mlm_logits(self.model(micro.token_ids, micro.attention_mask))
            loss_sum, _ = mlm_loss(logits, micro.labels, reduction="sum")
            (loss_sum / total).backward()
            nll += float(loss_sum.detach())

        mean = nll / total
        if not math.isfinite(mean):
            raise NonFiniteLossError(f"Non-finite training loss at step {self.step}")
        for group in self.optimizer.param_groups:
            group["lr"] = lr_at(self.schedule, self.step)
        self.optimizer.step()

        perplexity = math.exp(mean)
        self.log.add_train(self.step, perplexity)
        return perplexity

    @torch.no_grad()
    def validate(self) -> float:
        return evaluate_perplexity(
            self.model, self.valid_blocks, self.vocab, self.schedule.mask_prob, self.schedule.seed,
            self.schedule.micro_batch, self.device,
        )

    def run_epoch(self) -> None:
        self.epoch += 1
        order = self.epoch_order(self.epoch)
        size = self.schedule.batch_sequences
        updates = range(self.updates_per_epoch)
        for u in tqdm(updates, desc=f"Epoch {self.epoch}", disable=not self.show_progress):
            if self.step >= self.schedule.total_updates:
                break
            perplexity = self.update(order[u * size:(u + 1) * size])
            if perplexity is not None:
                logger.debug(f"step {self.step} lr {lr_at(self.schedule, self.step):.3e} ppl {perplexity:.2f}")

        valid = self.validate()
        self.log.add_valid(self.epoch, valid)
        logger.info(f"Epoch {self.epoch} done at step {self.step}: validation perplexity {valid:.2f}")

    def snapshot(self) -> Checkpoint:
        return capture(
            self.model,
            self.config,
            step=self.step,
            optimizer=self.optimizer,
            extra={
                "epoch": self.epoch,
                "best_valid": self.best_valid if math.isfinite(self.best_valid) else None,
                "train_points": self.log.train_points,
                "valid_points": self.log.valid_points,
                "schedule": self.schedule.model_dump(mode="json"),
            },
        )

    def resume(self, checkpoint: Checkpoint) -> None:
        if checkpoint.config != self.config:
            raise ConfigurationError("Resume checkpoint was trained with a different model config")
        restore_model(checkpoint, self.model)
        restore_optimizer(checkpoint, self.model, self.optimizer)
        restore_rng(checkpoint)
        self.step = checkpoint.step
        self.epoch = int(checkpoint.extra.get("epoch", 0))
        best = checkpoint.extra.get("best_valid")
        self.best_valid = math.inf if best is None else float(best)
        self.log = PerplexityLog(
            train_points=[(int(s), float(p)) for s, p in checkpoint.extra.get("train_points", [])],
            valid_points=[(int(e), float(p)) for e, p in checkpoint.extra.get("valid_points", [])],
        )
        logger.info(f"Resumed from step {self.step}, epoch {self.epoch}")

    def run(self, out_dir: PathLike) -> Tuple[Checkpoint, PerplexityLog]:
        from core.report import write_perplexity_csv, write_perplexity_svg

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        if self.epoch == 0 and not self.log.valid_points:
            initial = self.validate()
            self.log.add_valid(0, initial)
            logger.info(f"Initial validation perplexity {initial:.2f}")

        while self.step < self.schedule.total_updates:
            self.run_epoch()
            valid = self.log.valid_points[-1][1]
            improved = valid < self.best_valid
            if improved:
                self.best_valid = valid
            checkpoint = self.snapshot()
            path = out_dir / f"epoch-{self.epoch}.ckpt"
            save_checkpoint(checkpoint, path)
            if improved:
                shutil.copyfile(path, out_dir / "best.ckpt")
            write_perplexity_csv(self.log, out_dir)

        final = self.snapshot()
        save_checkpoint(final, out_dir / "final.ckpt")
        write_perplexity_csv(self.log, out_dir)
        write_perplexity_svg(self.log, out_dir / "perplexity.svg")
        return final, self.log


@torch.no_grad()
def evaluate_perplexity(
    model: RobertaEncoder,
    blocks: Batch,
    vocab: BpeVocab,
    mask_prob: float,
    seed: int,
    micro_batch: int = 16,
    device: Optional[torch.device] = None,
) -> float:
    "Masked-LM perplexity with a fixed masking draw, so repeated evaluations are comparable"
    model.eval()
    masked = apply_dynamic_masking(blocks, mask_prob, seed, 0, vocab, stream=VALID_STREAM)
    nll = 0.0
    count = 0
    for start in range(0, masked.token_ids.shape[0], micro_batch):
        micro = Batch(
            masked.token_ids[start:start + micro_batch],
            masked.attention_mask[start:start + micro_batch],
            masked.labels[start:start + micro_batch],
        )
        if device is not None:
            micro = micro.to(device)
        try:
            loss_sum, n = mlm_loss(model.mlm_logits(model(micro.token_ids, micro.attention_mask)), micro.labels, reduction="sum")
        except NoMaskedPositions:
            continue
        nll += float(loss_sum)
        count += n
    if count == 0:
        raise NoMaskedPositions("Validation set produced no masked positions")
    return math.exp(nll / count)


def train(
    config: ModelConfig,
    schedule: TrainSchedule,
    train_manifest: CorpusManifest,
    valid_manifest: CorpusManifest,
    vocab: BpeVocab,
    out_dir: PathLike,
    resume: Optional[PathLike] = None,
    device: str = "cpu",
    show_progress: bool = False,
) -> Tuple[Checkpoint, PerplexityLog]:
    train_blocks = pack_sequences(encode_manifest(vocab, train_manifest, show_progress), schedule.seq_len, vocab)
    valid_blocks = pack_sequences(encode_manifest(vocab, valid_manifest, show_progress), schedule.seq_len, vocab)
    logger.info(
        f"Packed {train_blocks.token_ids.shape[0]} training and {valid_blocks.token_ids.shape[0]} validation blocks"
    )
    trainer = Pretrainer(config, schedule, vocab, train_blocks, valid_blocks, device=device, show_progress=show_progress)
    if resume is not None:
        trainer.resume(load_checkpoint(resume))
    return trainer.run(out_dir)

