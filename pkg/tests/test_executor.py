# tests/test_executor.py
import threading
import time

import pytest

from heralded_diqkd.utils import executor


@pytest.fixture(autouse=True)
def clear_job_log():
    executor._recent_jobs.clear()


def test_run_jobs_sequential_keeps_order():
    assert executor.run_jobs(lambda x: x * x, [3, 1, 2]) == [9, 1, 4]
    assert executor.get_recent_job_logs()[-1] == '[JOB] job #2 done'


def test_run_jobs_parallel_keeps_order():
    def slow_square(x):
        time.sleep(0.01 * (3 - x))
        return x * x

    assert executor.run_jobs(slow_square, [0, 1, 2], workers=3, label='square') == [0, 1, 4]


def test_run_jobs_limits_concurrency():
    active = []
    peak = []
    lock = threading.Lock()

    def job(_):
        with lock:
            active.append(1)
            peak.append(len(active))
        time.sleep(0.02)
        with lock:
            active.pop()

    executor.run_jobs(job, range(6), workers=2)
    assert max(peak) <= 2


def test_run_jobs_propagates_errors():
    def job(x):
        if x == 1:
            raise ArithmeticError('boom')
        return x

    with pytest.raises(ArithmeticError):
        executor.run_jobs(job, [0, 1, 2], workers=2, label='fragile')
    assert any('fragile #1 failed: boom' in line for line in executor.get_recent_job_logs())


@pytest.mark.asyncio
async def test_run_jobs_inside_a_loop_falls_back_to_sequential():
    threads = set()

    def job(x):
        threads.add(threading.get_ident())
        return x

    assert executor.run_jobs(job, [1, 2, 3], workers=4) == [1, 2, 3]
    assert threads == {threading.get_ident()}


@pytest.mark.asyncio
async def test_run_jobs_async_uses_worker_threads():
    main_thread = threading.get_ident()
    results = await executor.run_jobs_async(lambda _: threading.get_ident(), [0, 1], workers=2)
    assert main_thread not in results


def test_job_log_is_bounded():
    executor.run_jobs(lambda x: x, range(200))
    assert len(executor.get_recent_job_logs()) == 100
