"""
Tests for the ordered thread pool.
"""

import random
import threading
import time

import pytest

from src.utils.thread_pool import OrderedThreadPool, map_ordered


def _jittered_square(x):
    time.sleep(random.uniform(0.0, 0.005))
    return x * x


class TestOrderedThreadPool:
    """Tests for ordered parallel mapping."""

    def test_results_in_input_order(self):
        with OrderedThreadPool(workers=4) as pool:
            assert list(pool.map_ordered(_jittered_square, range(50))) == [x * x for x in range(50)]

    def test_work_runs_on_several_threads(self):
        seen = set()

        def record(x):
            seen.add(threading.current_thread().name)
            time.sleep(0.01)
            return x

        with OrderedThreadPool(workers=3, thread_name_prefix="test-worker") as pool:
            list(pool.map_ordered(record, range(12)))
        assert len(seen) > 1
        assert all(name.startswith("test-worker-") for name in seen)

    def test_in_flight_is_bounded(self):
        active = []
        peak = [0]
        lock = threading.Lock()

        def track(x):
            with lock:
                active.append(x)
                peak[0] = max(peak[0], len(active))
            time.sleep(0.002)
            with lock:
                active.remove(x)
            return x

        with OrderedThreadPool(workers=2, max_in_flight=2) as pool:
            list(pool.map_ordered(track, range(20)))
        assert peak[0] <= 2

    def test_exception_is_raised_in_order(self):
        def fail_on_five(x):
            if x == 5:
                raise RuntimeError("five")
            return x

        results = []
        with OrderedThreadPool(workers=3) as pool:
            with pytest.raises(RuntimeError, match="five"):
                for value in pool.map_ordered(fail_on_five, range(10)):
                    results.append(value)
        assert results == [0, 1, 2, 3, 4]

    def test_invalid_worker_count(self):
        with pytest.raises(ValueError):
            OrderedThreadPool(workers=0)

    def test_shutdown_stops_threads(self):
        pool = OrderedThreadPool(workers=2).start()
        threads = list(pool._threads)
        pool.shutdown()
        assert not any(t.is_alive() for t in threads)


class TestMapOrdered:
    def test_inline_when_single_worker(self):
        names = list(map_ordered(lambda _: threading.current_thread().name, range(3), workers=1))
        assert names == [threading.current_thread().name] * 3

    def test_parallel_matches_inline(self):
        assert list(map_ordered(_jittered_square, range(30), workers=4)) == [x * x for x in range(30)]
