"""Thread pool for per-slide forward/backward passes.

Tapes are thread-local, so each worker records its own graph. Results come
back in item order and gradients are summed in that order, which keeps a
multi-threaded run equal to the single-threaded one up to rounding.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable
from typing import Optional
from typing import Sequence
from typing import TypeVar

import numpy as np

from ..logging import get_logger


logger = get_logger("parallel")

T = TypeVar("T")
R = TypeVar("R")


class SlidePool:
    """Maps a function over slides with up to `workers` threads.

    Use as a context manager; with one worker everything runs inline.
    """

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._executor: Optional[ThreadPoolExecutor] = None

    def __enter__(self) -> "SlidePool":
        if self.workers > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=self.workers, thread_name_prefix="pixel-mamba"
            )
            logger.debug(f"Started slide pool with {self.workers} threads")
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def map(self, fn: Callable[[T], R], items: Sequence[T]) -> list[R]:
        """Apply fn to every item; results are in item order."""
        if self._executor is None or len(items) < 2:
            return [fn(item) for item in items]
        return list(self._executor.map(fn, items))


def reduce_gradients(
    grads: Sequence[dict[str, np.ndarray]], average: bool = True
) -> dict[str, np.ndarray]:
    """Sum (or average) gradient maps in the order given."""
    if not grads:
        return {}
    total = {name: np.array(value, copy=True) for name, value in grads[0].items()}
    for grad in grads[1:]:
        for name, value in grad.items():
            total[name] = total[name] + value
    if average and len(grads) > 1:
        total = {name: value / len(grads) for name, value in total.items()}
    return total
