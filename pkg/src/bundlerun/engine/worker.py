"""Bounded worker pool consuming the persistent job queue."""

from __future__ import annotations

import logging
import threading

from bundlerun.engine.executor import Executor
from bundlerun.engine.queue import JobQueue

log = logging.getLogger(__name__)


class WorkerPool:
    def __init__(
        self,
        queue: JobQueue,
        executor: Executor,
        *,
        size: int = 2,
        poll_interval: float = 0.2,
        name: str = "worker",
    ):
        assert size >= 1
        self._queue = queue
        self._executor = executor
        self._size = size
        self._poll = poll_interval
        self._name = name
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def start(self, *, recover: bool = True) -> "WorkerPool":
        # recover=False when joining a deployment whose other replicas may
        # hold live jobs; recovery is for restarts after a full stop
        if recover:
            self._queue.recover_stranded()
        for i in range(self._size):
            t = threading.Thread(
                target=self._loop, name=f"{self._name}-{i}", daemon=True
            )
            t.start()
            self._threads.append(t)
        return self

    def _loop(self) -> None:
        me = threading.current_thread().name
        while not self._stop.is_set():
            job_id = self._queue.claim(me)
            if job_id is None:
                self._stop.wait(self._poll)
                continue
            try:
                state = self._executor.execute_job(job_id)
                log.info("job %s finished %s", job_id, state)
            except Exception:  # a broken job must never kill its worker
                log.exception("job %s: executor raised", job_id)
                try:
                    self._queue.try_set_state(
                        job_id, "FAILED", error="executor crashed; see server log"
                    )
                except Exception:
                    log.exception("job %s: could not record failure", job_id)

    def stop(self, timeout: float = 60.0) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=timeout)
        self._threads.clear()

    def __enter__(self) -> "WorkerPool":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
