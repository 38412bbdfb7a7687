import logging
import queue
import threading
import time
from enum import Enum
from typing import Any, Callable, Dict, Hashable, Iterable, List, Optional

from django.conf import settings


class TaskStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


def default_threads() -> int:
    return max(1, int(getattr(settings, "FEDSEG_THREADS", 1) or 1))


class ClientWorkerPool:
    """Fixed worker threads fed from a queue; used for per-round client fan-out.

    Results are always handed back in the order the tasks were submitted, so callers
    that submit in client-id order get deterministic joins no matter which worker
    finished first. A pool with one thread runs everything inline.
    """

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max(1, int(max_workers or default_threads()))
        self.task_queue: "queue.Queue" = queue.Queue()
        self.workers: List[threading.Thread] = []
        self.running = False
        self.tasks: Dict[str, Dict[str, Any]] = {}
        self._lock = threading.Lock()
        self.logger = logging.getLogger(__name__)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.stop_workers()
        return False

    def start_workers(self, count: int):
        """Starts worker threads up to ``count`` (never more than ``max_workers``)."""
        self.running = True
        target = min(count, self.max_workers)
        while len(self.workers) < target:
            worker_id = len(self.workers)
            worker = threading.Thread(target=self._worker_loop, args=(worker_id,), name=f"fedseg-worker-{worker_id}")
            worker.daemon = True
            worker.start()
            self.workers.append(worker)
            self.logger.debug(f"Started worker {worker_id}")

    def stop_workers(self):
        if not self.workers:
            return
        self.running = False
        for _ in self.workers:
            self.task_queue.put(None)
        for worker in self.workers:
            worker.join(timeout=5)
        self.logger.debug(f"Stopped {len(self.workers)} workers")
        self.workers = []

    def _worker_loop(self, worker_id: int):
        while True:
            item = self.task_queue.get()
            if item is None:
                self.task_queue.task_done()
                return
            task, done = item
            self._execute_task(worker_id, task)
            done.put(task["id"])
            self.task_queue.task_done()

    def _execute_task(self, worker_id: int, task: Dict[str, Any]):
        task["status"] = TaskStatus.RUNNING
        task["worker_id"] = worker_id
        task["started_at"] = time.perf_counter()
        try:
            task["result"] = task["function"]()
            task["status"] = TaskStatus.COMPLETED
        except BaseException as e:
            task["error"] = e
            task["status"] = TaskStatus.FAILED
            self.logger.error(f"Task {task['id']} failed on worker {worker_id}: {e}")
        finally:
            task["elapsed_ms"] = (time.perf_counter() - task["started_at"]) * 1000.0

    def map_tasks(self, label: str, functions: Dict[Hashable, Callable[[], Any]]) -> Dict[Hashable, Any]:
        """Runs every zero-argument callable and returns ``{key: result}`` in submission order.

        The first failure (in submission order) is re-raised in the calling thread after
        all tasks have finished.
        """
        tasks = []
        with self._lock:
            for key, function in functions.items():
                task = {
                    "id": f"{label}:{key}",
                    "key": key,
                    "function": function,
                    "status": TaskStatus.PENDING,
                    "result": None,
                    "error": None,
                    "worker_id": None,
                }
                self.tasks[task["id"]] = task
                tasks.append(task)

        if self.max_workers == 1 or len(tasks) <= 1:
            for task in tasks:
                self._execute_task(0, task)
        else:
            self.start_workers(len(tasks))
            done: "queue.Queue" = queue.Queue()
            for task in tasks:
                self.task_queue.put((task, done))
            for _ in tasks:
                done.get()

        with self._lock:
            for task in tasks:
                self.tasks.pop(task["id"], None)
        for task in tasks:
            if task["status"] == TaskStatus.FAILED:
                raise task["error"]
        return {task["key"]: task["result"] for task in tasks}

    def map_clients(self, label: str, client_ids: Iterable[int], function: Callable[[int], Any]) -> List[Any]:
        """``function(client_id)`` for every client; results joined in ascending client-id order."""
        ordered = sorted(client_ids)
        results = self.map_tasks(label, {cid: (lambda c=cid: function(c)) for cid in ordered})
        return [results[cid] for cid in ordered]
