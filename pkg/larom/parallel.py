"""Worker pool for per-parameter sweeps (snapshots, evaluation, registration, EQ rows)."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


def resolve_jobs(jobs: Optional[int]) -> int:
    """``None`` or 0 means one worker per CPU."""
    if not jobs:
        return os.cpu_count() or 1
    return max(1, int(jobs))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: Optional[int] = 1) -> List[R]:
    """``[fn(x) for x in items]`` in input order; the first exception propagates."""
    items = list(items)
    workers = min(resolve_jobs(jobs), max(len(items), 1))
    if workers == 1:
        return [fn(item) for item in items]
    logger.debug(f"running {len(items)} tasks on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
