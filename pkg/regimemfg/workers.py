import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from loguru import logger

THREADS_ENVIRONMENT_VARIABLE = "MFG_THREADS"

T = TypeVar("T")
R = TypeVar("R")


class WorkerPoolError(RuntimeError):
    pass


def resolve_thread_count(requested: Optional[int] = None) -> int:
    """
    ``requested`` if given, otherwise the ``MFG_THREADS`` environment variable, otherwise 1.
    """
    if requested is None:
        value = os.environ.get(THREADS_ENVIRONMENT_VARIABLE, "").strip()
        if not value:
            return 1
        try:
            requested = int(value)
        except ValueError:
            raise WorkerPoolError(f"{THREADS_ENVIRONMENT_VARIABLE} must be an integer, got {value!r}") from None
    if requested < 1:
        raise WorkerPoolError(f"Thread count must be at least 1, got {requested}")
    return requested


class NodeSweeper:
    """
    Runs the per-node tasks of one tree level on a thread pool.  ``sweep`` returns when every task of the level has
    finished, so consecutive calls are separated by a barrier.  Tasks must only write their own output rows; results
    are then independent of the thread count.
    """

    def __init__(self, threads: int = 1):
        self.threads = resolve_thread_count(threads)
        self._executor = None  # type: Optional[ThreadPoolExecutor]

    def __enter__(self) -> "NodeSweeper":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def _run(self, task: Callable[[T], R], item: T) -> R:
        try:
            return task(item)
        except Exception:
            logger.exception(f"Worker task failed on {item!r}")
            raise

    def sweep(self, task: Callable[[T], R], items: Iterable[T]) -> List[R]:
        items = list(items)
        if self.threads == 1 or len(items) < 2:
            return [task(item) for item in items]

        if self._executor is None:
            self._executor = ThreadPoolExecutor(max_workers=self.threads, thread_name_prefix="node-sweep")
        futures = [self._executor.submit(self._run, task, item) for item in items]
        return [future.result() for future in futures]
