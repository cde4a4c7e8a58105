import base64
import gzip
import random
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import IO, Union

import numpy as np
import torch
from coloredlogs import install as install_coloredlogs

PathLike = Union[str, Path]


def setup_logging(level: str = "INFO") -> None:
    install_coloredlogs(level.upper(), fmt="%(asctime)s %(name)s %(levelname)s %(message)s")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def round_half_up(value: float, digits: int = 2) -> float:
    quantum = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def open_records(path: PathLike, mode: str = "rb") -> IO:
    "Open a newline-delimited record file, transparently handling gzip"
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def convert_bytes_to_base64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def convert_base64_to_bytes(data: str) -> bytes:
    return base64.b64decode(data)


def format_hours_minutes(seconds: float) -> str:
    minutes = int(round(seconds / 60))
    return f"{minutes // 60}:{minutes % 60:02d}"
