# heralded_diqkd/utils/executor.py
import asyncio
import collections
import logging
from typing import Any, Callable, Iterable, List

logger = logging.getLogger(__name__)

# Using a deque for recent job events for debugging/logging purposes
_recent_jobs = collections.deque(maxlen=100)  # Store last 100 job events


async def run_jobs_async(fn: Callable[[Any], Any], items: Iterable[Any], workers: int = 1,
                         label: str = 'job') -> List[Any]:
    """
    Runs a pure function over `items` in worker threads with bounded concurrency.

    Args:
        fn: The function applied to each item. It must not share mutable state.
        items: Inputs; results come back in the same order.
        workers: Maximum number of jobs running at the same time.
        label: Name used in the recent-jobs log.

    Returns:
        A list of results, ordered like `items`.

    Raises:
        Any exception raised by `fn`; remaining jobs are cancelled.
    """
    semaphore = asyncio.Semaphore(max(1, int(workers)))

    async def _run_one(index: int, item: Any) -> Any:
        async with semaphore:
            _recent_jobs.append(f"[JOB] {label} #{index} started")
            try:
                result = await asyncio.to_thread(fn, item)
            except Exception as e:
                _recent_jobs.append(f"[JOB] {label} #{index} failed: {e}")
                raise
            _recent_jobs.append(f"[JOB] {label} #{index} done")
            return result

    tasks = [asyncio.create_task(_run_one(i, item)) for i, item in enumerate(items)]
    try:
        return list(await asyncio.gather(*tasks))
    except BaseException:
        for task in tasks:
            if not task.done():
                task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise


def run_jobs(fn: Callable[[Any], Any], items: Iterable[Any], workers: int = 1,
             label: str = 'job') -> List[Any]:
    """
    Synchronous wrapper around run_jobs_async. Runs sequentially when `workers` is 1
    or when called from a thread that already runs an event loop.
    """
    items = list(items)
    try:
        asyncio.get_running_loop()
        in_loop = True
    except RuntimeError:
        in_loop = False
    if workers <= 1 or in_loop:
        if in_loop and workers > 1:
            logger.debug("run_jobs called inside a running loop; running %s jobs sequentially", label)
        results = []
        for index, item in enumerate(items):
            _recent_jobs.append(f"[JOB] {label} #{index} started")
            results.append(fn(item))
            _recent_jobs.append(f"[JOB] {label} #{index} done")
        return results
    return asyncio.run(run_jobs_async(fn, items, workers, label))


def get_recent_job_logs() -> List[str]:
    """Returns a list of recent job events for debugging."""
    return list(_recent_jobs)
