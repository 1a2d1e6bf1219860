"""
Thread pool utilities for Viko Contact.
Bounded worker pool that maps a function over a stream and yields results in input order.
"""

import logging
import queue
import threading
from typing import Any, Callable, Dict, Iterable, Iterator, Optional

# Set up logging
logger = logging.getLogger(__name__)

_STOP = object()


class _Failure:
    """Carries an exception from a worker back to the consumer."""

    def __init__(self, exception: BaseException):
        self.exception = exception


class OrderedThreadPool:
    """
    Fixed-size thread pool with a bounded number of in-flight items.

    Results of map_ordered come back strictly in submission order whatever
    order the workers finish in.
    """

    def __init__(self, workers: int = 2, max_in_flight: Optional[int] = None, thread_name_prefix: str = "frame-worker"):
        """
        Initialize the thread pool.

        Args:
            workers: Number of worker threads (>= 1)
            max_in_flight: Items queued or running at once (defaults to 2 * workers)
            thread_name_prefix: Prefix for worker thread names
        """
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self.max_in_flight = max(max_in_flight or 2 * workers, workers)
        self.thread_name_prefix = thread_name_prefix

        self._tasks: "queue.Queue[Any]" = queue.Queue()
        self._results: Dict[int, Any] = {}
        self._results_ready = threading.Condition()
        self._threads = []
        self._running = False
        self.completed = 0

    def start(self) -> "OrderedThreadPool":
        if self._running:
            return self
        self._running = True
        for i in range(self.workers):
            worker = threading.Thread(target=self._worker_loop, name=f"{self.thread_name_prefix}-{i}", daemon=True)
            self._threads.append(worker)
            worker.start()
        logger.debug(f"Started {self.workers} workers ({self.max_in_flight} in flight)")
        return self

    def _worker_loop(self) -> None:
        while True:
            task = self._tasks.get()
            if task is _STOP:
                self._tasks.task_done()
                break
            seq, func, item = task
            try:
                result = func(item)
            except BaseException as e:
                result = _Failure(e)
            with self._results_ready:
                self._results[seq] = result
                self.completed += 1
                self._results_ready.notify_all()
            self._tasks.task_done()

    def map_ordered(self, func: Callable[[Any], Any], items: Iterable[Any]) -> Iterator[Any]:
        """
        Apply func to every item, yielding results in input order.

        An exception raised by func is re-raised when its result is due.
        """
        self.start()
        source = iter(items)
        next_submit = 0
        next_yield = 0
        exhausted = False

        while True:
            while not exhausted and next_submit - next_yield < self.max_in_flight:
                try:
                    item = next(source)
                except StopIteration:
                    exhausted = True
                    break
                self._tasks.put((next_submit, func, item))
                next_submit += 1

            if exhausted and next_yield == next_submit:
                return

            with self._results_ready:
                while next_yield not in self._results:
                    self._results_ready.wait()
                result = self._results.pop(next_yield)
            next_yield += 1

            if isinstance(result, _Failure):
                raise result.exception
            yield result

    def shutdown(self, wait: bool = True, timeout: Optional[float] = None) -> None:
        """Stop the workers once queued tasks are done."""
        if not self._running:
            return
        for _ in self._threads:
            self._tasks.put(_STOP)
        if wait:
            for worker in self._threads:
                worker.join(timeout=timeout)
        self._threads = []
        self._running = False
        logger.debug(f"Thread pool shut down after {self.completed} tasks")

    def __enter__(self) -> "OrderedThreadPool":
        return self.start()

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.shutdown()


def map_ordered(func: Callable[[Any], Any], items: Iterable[Any], workers: int = 1) -> Iterator[Any]:
    """Ordered map; runs inline when workers == 1."""
    if workers <= 1:
        for item in items:
            yield func(item)
        return
    with OrderedThreadPool(workers=workers) as pool:
        yield from pool.map_ordered(func, items)
