import asyncio
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from typing import Any, Callable, Optional, Tuple

from core.models import ModelHandler

logger = logging.getLogger(__name__)


class Queue:
    "Runs model work one job at a time on a worker thread, off the event loop"

    def __init__(self, model_handler: Optional[ModelHandler] = None) -> None:
        self.model_handler = model_handler or ModelHandler()
        self.thread_pool = ThreadPoolExecutor(max_workers=1)
        self.pending = 0

    async def run(self, fn: Callable[..., Any], *args: Any) -> Tuple[Any, float]:
        self.pending += 1
        logger.debug(f"Queued {fn.__name__} ({self.pending} pending)")
        start_time = time.time()
        try:
            loop = asyncio.get_running_loop()
            result = await loop.run_in_executor(self.thread_pool, partial(fn, *args))
        finally:
            self.pending -= 1
        return result, time.time() - start_time
