import asyncio
import logging
import time
from abc import abstractmethod
from typing import (
    Any,
    Callable,
    Dict,
    Hashable,
    Optional,
    Protocol,
    Sequence,
    Tuple,
    TypeVar,
    Union,
    runtime_checkable,
)

from danielutils import AsyncWorkerPool

logger = logging.getLogger(__name__)

ABLATION_POOL_NAME: str = "qerl ablation"

K = TypeVar("K", bound=Hashable)
R = TypeVar("R")
Outcome = Union[R, BaseException]


@runtime_checkable
class SupportsProgress(Protocol):
    """Progress bar protocol, satisfied by tqdm."""

    @abstractmethod
    def update(self, amount: int) -> None:
        """Advance by `amount` items."""

    @property
    @abstractmethod
    def total(self) -> int:
        """Total number of items."""

    @total.setter
    @abstractmethod
    def total(self, amount: int) -> None:
        """Set the total number of items."""


class WorkerPool(AsyncWorkerPool):
    """Async pool whose own diagnostics go through the package logger."""

    @staticmethod
    def log(level: int, message: str, *args: Any, **kwargs: Any) -> None:
        logger.log(level, message, *args, **kwargs)


async def _blocking_job(
    func: Callable[[Any], R],
    argument: Any,
    key: Hashable,
    results: Dict[Hashable, Any],
    progress: Optional[SupportsProgress],
) -> None:
    start = time.perf_counter()
    try:
        results[key] = await asyncio.to_thread(func, argument)
        logger.debug("Job %s finished in %.3fs", key, time.perf_counter() - start)
    except Exception as e:
        logger.error("Job %s failed after %.3fs: %s", key, time.perf_counter() - start, e)
        results[key] = e
    if progress is not None:
        progress.update(1)


async def _run_async(
    func: Callable[[Any], R],
    jobs: Sequence[Tuple[K, Any]],
    n_workers: int,
    describe: Callable[[K], str],
    progress: Optional[SupportsProgress],
    pool_name: str,
) -> Dict[Hashable, Any]:
    results: Dict[Hashable, Any] = {}
    pool = WorkerPool(pool_name, num_workers=n_workers)
    for key, argument in jobs:
        await pool.submit(
            _blocking_job,
            args=[func, argument, key, results, progress],
            name=describe(key),
        )
    logger.info("Starting '%s' with %d jobs on %d workers", pool_name, len(jobs), n_workers)
    await pool.start()
    await pool.join()
    return results


def run_keyed_jobs(
    func: Callable[[Any], R],
    jobs: Sequence[Tuple[K, Any]],
    n_workers: int,
    *,
    describe: Callable[[K], str] = str,
    progress: Optional[SupportsProgress] = None,
    pool_name: str = ABLATION_POOL_NAME,
) -> Dict[K, "Outcome[R]"]:
    """Runs func(argument) for every (key, argument) on worker threads.

    A failing job stores its exception under its key instead of stopping the others.
    Every key is present in the returned mapping.
    """
    if progress is not None:
        progress.total = len(jobs)
    results = asyncio.run(_run_async(func, jobs, n_workers, describe, progress, pool_name))
    for key, _ in jobs:
        results.setdefault(key, RuntimeError(f"Job {key} did not run"))
    return results  # type: ignore[return-value]


__all__ = [
    "ABLATION_POOL_NAME",
    "SupportsProgress",
    "WorkerPool",
    "run_keyed_jobs",
]
