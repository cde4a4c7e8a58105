import gc
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, Optional

import torch

from core.bpe import BpeVocab
from core.config import EvalParams
from core.encoder.checkpoint import encoder_only, load_checkpoint, restore_model
from core.encoder.model import RobertaEncoder, count_parameters
from core.errors import ConfigurationError
from core.evalx import pll_score
from core.types import Encoding

logger = logging.getLogger(__name__)


class ModelHandler:
    "Keeps one encoder and its tokenizer loaded for serving requests"

    def __init__(
        self,
        checkpoint_path: Optional[Path] = None,
        tokenizer_dir: Optional[Path] = None,
        params: EvalParams = EvalParams(),
        device: str = "cpu",
    ) -> None:
        self.checkpoint_path = checkpoint_path
        self.tokenizer_dir = tokenizer_dir
        self.params = params
        self.device = torch.device(device)
        self.model: Optional[RobertaEncoder] = None
        self.vocab: Optional[BpeVocab] = None

    def _path(self, given: Optional[Path], variable: str) -> Path:
        value = given or os.environ.get(variable)
        if not value:
            raise ConfigurationError(f"No path configured; set {variable}")
        return Path(value)

    def get_vocab(self) -> BpeVocab:
        if self.vocab is None:
            directory = self._path(self.tokenizer_dir, "SINDBERT_TOKENIZER")
            self.vocab = BpeVocab.load(directory)
            logger.info(f"Loaded tokenizer from {directory} ({len(self.vocab)} entries)")
        return self.vocab

    def get_model(self) -> RobertaEncoder:
        if self.model is None:
            path = self._path(self.checkpoint_path, "SINDBERT_CKPT")
            start_time = time.time()
            checkpoint = encoder_only(load_checkpoint(path))
            checkpoint.config.check_tokenizer(len(self.get_vocab()))
            model = RobertaEncoder(checkpoint.config)
            restore_model(checkpoint, model)
            self.model = model.to(self.device).eval()
            logger.info(f"Loaded {path} in {time.time() - start_time:.2f}s")
        return self.model

    def encode(self, text: str) -> Encoding:
        return self.get_vocab().encode(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return self.get_vocab().decode(ids).decode("utf-8", errors="replace")

    def pll(self, sentence: str) -> float:
        return pll_score(
            self.get_model(), self.get_vocab(), sentence,
            batch_size=self.params.batch_size, length_normalize=self.params.length_normalize,
        )

    def score_pair(self, good: str, bad: str) -> Dict[str, Any]:
        good_score, bad_score = self.pll(good), self.pll(bad)
        return {"good": good_score, "bad": bad_score, "correct": good_score > bad_score}

    def summary(self) -> Dict[str, Any]:
        model = self.get_model()
        return {
            "config": model.config.model_dump(mode="json"),
            "parameters": count_parameters(model.config),
            "vocab_size": len(self.get_vocab()),
        }

    def unload(self) -> None:
        self.model = None
        self.vocab = None
        self.free_memory()

    def free_memory(self) -> None:
        gc.collect()
        if torch.cuda.is_available():
            torch.cuda.empty_cache()
