"""Bounded background worker pool on the virtual clock.

At most ``capacity`` tasks run at once; tasks sharing a key (an application
id) run one after another in submission order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Optional

from .clock import Process, VirtualClock

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class Task:
    key: Hashable
    name: str
    factory: Callable[[], Any]
    submitted_at: float
    proc: Optional[Process] = None
    cancelled: bool = False
    done_callbacks: list = field(default_factory=list)

    @property
    def running(self) -> bool:
        return self.proc is not None and not self.proc.done


class WorkerPool:
    def __init__(self, clock: VirtualClock, capacity: int = 100):
        if capacity < 1:
            raise ValueError("pool capacity must be >= 1")
        self.clock = clock
        self.capacity = capacity
        self.queue: list[Task] = []
        self.running: dict[Hashable, Task] = {}
        self.peak = 0
        self.completed = 0
        self.failed: list[tuple[Task, BaseException]] = []
        self.history: list[tuple[float, int]] = [(clock.now, 0)]

    @property
    def active(self) -> int:
        return len(self.running)

    def busy(self, key: Hashable) -> bool:
        return key in self.running or any(t.key == key for t in self.queue)

    def queued_names(self, key: Hashable) -> list[str]:
        names = [t.name for t in self.queue if t.key == key]
        if key in self.running:
            names.insert(0, self.running[key].name)
        return names

    def submit(self, key: Hashable, factory: Callable[[], Any], name: str = "") -> Task:
        """Queue ``factory()`` (a generator function call) to run under ``key``."""
        task = Task(key, name or getattr(factory, "__name__", "task"), factory, self.clock.now)
        self.queue.append(task)
        self._pump()
        return task

    def cancel(self, key: Hashable) -> int:
        """Drop queued tasks and kill the running one for ``key``."""
        dropped = [t for t in self.queue if t.key == key]
        self.queue = [t for t in self.queue if t.key != key]
        for t in dropped:
            t.cancelled = True
        task = self.running.get(key)
        if task is not None:
            task.cancelled = True
            task.proc.kill()
            dropped.append(task)
        return len(dropped)

    def _pump(self) -> None:
        i = 0
        while i < len(self.queue) and len(self.running) < self.capacity:
            task = self.queue[i]
            if task.key in self.running:
                i += 1
                continue
            self.queue.pop(i)
            self._start(task)

    def _start(self, task: Task) -> None:
        self.running[task.key] = task
        self.peak = max(self.peak, len(self.running))
        self._record()
        task.proc = self.clock.spawn(task.factory(), name=task.name)
        task.proc.add_waiter(lambda: self._finish(task))

    def _finish(self, task: Task) -> None:
        if self.running.get(task.key) is task:
            del self.running[task.key]
        if task.proc.error is not None:
            logger.warning("task %s failed: %r", task.name, task.proc.error)
            self.failed.append((task, task.proc.error))
        self.completed += 1
        self._record()
        for cb in task.done_callbacks:
            cb(task)
        self._pump()

    def _record(self) -> None:
        if self.history and self.history[-1][0] == self.clock.now:
            self.history[-1] = (self.clock.now, len(self.running))
        else:
            self.history.append((self.clock.now, len(self.running)))
