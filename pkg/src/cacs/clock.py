"""Deterministic virtual clock with a tiny generator-based process model.

Events fire in ``(time, priority, insertion sequence)`` order, so identical
scripts produce identical traces. A process is a generator that yields
either a non-negative delay, a :class:`Signal` or another :class:`Process`;
it is resumed when the delay elapses or the awaited object completes.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Optional

logger = logging.getLogger(__name__)

NORMAL = 0
# Samplers and meters run after every state change at the same instant.
LATE = 10

# Timestamps live on a 2**-20 s grid. Every grid point is exact in binary
# floating point, so differences of timestamps (phase durations) are exact too.
RESOLUTION = 2 ** 20


def quantize(t: float) -> float:
    return round(t * RESOLUTION) / RESOLUTION


@dataclass(order=True)
class Event:
    time: float
    priority: int
    seq: int
    callback: Callable = field(compare=False)
    args: tuple = field(compare=False, default=())
    name: str = field(compare=False, default="")
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class Signal:
    """One-shot completion flag that processes can wait on."""

    def __init__(self, clock: "VirtualClock", name: str = ""):
        self.clock = clock
        self.name = name
        self.fired = False
        self.value: Any = None
        self.error: Optional[BaseException] = None
        self._waiters: list[Callable[[], None]] = []

    def fire(self, value: Any = None) -> None:
        if self.fired:
            return
        self.fired = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for waiter in waiters:
            self.clock.call_soon(waiter, name=f"wake:{self.name}")

    def fail(self, error: BaseException) -> None:
        if self.fired:
            return
        self.error = error
        self.fire(None)

    def add_waiter(self, waiter: Callable[[], None]) -> None:
        if self.fired:
            self.clock.call_soon(waiter, name=f"wake:{self.name}")
        else:
            self._waiters.append(waiter)


ProcessGen = Generator[Any, Any, Any]


class Process(Signal):
    """A running generator; fires (as a :class:`Signal`) when it returns."""

    def __init__(self, clock: "VirtualClock", gen: ProcessGen, name: str = ""):
        super().__init__(clock, name)
        self._gen = gen
        self._pending: Optional[Event] = None
        self.killed = False

    def _step(self, send: Any = None, throw: Optional[BaseException] = None) -> None:
        self._pending = None
        if self.killed or self.fired:
            return
        try:
            if throw is not None:
                target = self._gen.throw(throw)
            else:
                target = self._gen.send(send)
        except StopIteration as stop:
            self.fire(stop.value)
            return
        except Exception as exc:  # noqa: BLE001 - surfaced through .error
            logger.debug("process %s failed: %r", self.name, exc)
            self.fail(exc)
            return
        self._wait_on(target)

    def _wait_on(self, target: Any) -> None:
        if isinstance(target, Signal):
            def wake(sig=target):
                if sig.error is not None:
                    self._step(throw=sig.error)
                else:
                    self._step(send=sig.value)
            target.add_waiter(wake)
        elif target is None:
            self._pending = self.clock.call_soon(self._step, name=f"resume:{self.name}")
        else:
            delay = float(target)
            if delay < 0:
                self._step(throw=ValueError(f"negative delay {delay}"))
                return
            self._pending = self.clock.schedule(delay, self._step, name=f"resume:{self.name}")

    def kill(self) -> None:
        """Stop the process without running any more of its code."""
        if self.fired:
            return
        self.killed = True
        if self._pending is not None:
            self._pending.cancel()
        self._gen.close()
        self.fire(None)

    @property
    def done(self) -> bool:
        return self.fired

    def result(self) -> Any:
        if not self.fired:
            raise RuntimeError(f"process {self.name} has not finished")
        if self.error is not None:
            raise self.error
        return self.value


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.now = quantize(float(start))
        self._queue: list[Event] = []
        self._seq = itertools.count()

    def schedule(self, delay: float, callback: Callable, *args, priority: int = NORMAL,
                 name: str = "") -> Event:
        if delay < 0:
            raise ValueError(f"cannot schedule in the past (delay={delay})")
        return self.schedule_at(self.now + delay, callback, *args, priority=priority, name=name)

    def schedule_at(self, at: float, callback: Callable, *args, priority: int = NORMAL,
                    name: str = "") -> Event:
        at = quantize(at)
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} < now {self.now}")
        event = Event(at, priority, next(self._seq), callback, args, name)
        heapq.heappush(self._queue, event)
        return event

    def call_soon(self, callback: Callable, *args, name: str = "") -> Event:
        return self.schedule(0.0, callback, *args, name=name)

    def signal(self, name: str = "") -> Signal:
        return Signal(self, name)

    def spawn(self, gen: ProcessGen, name: str = "") -> Process:
        proc = Process(self, gen, name)
        proc._pending = self.call_soon(proc._step, name=f"start:{name}")
        return proc

    @property
    def pending(self) -> int:
        return sum(1 for e in self._queue if not e.cancelled)

    def peek(self) -> Optional[float]:
        while self._queue and self._queue[0].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0].time if self._queue else None

    def _fire_next(self) -> Event:
        event = heapq.heappop(self._queue)
        self.now = event.time
        event.callback(*event.args)
        return event

    def advance(self, until: float) -> list[Event]:
        """Fire every event with timestamp <= ``until``; then ``now = until``."""
        until = quantize(until)
        if until < self.now:
            raise ValueError(f"cannot advance backwards to {until} (now {self.now})")
        fired = []
        while True:
            nxt = self.peek()
            if nxt is None or nxt > until:
                break
            fired.append(self._fire_next())
        self.now = until
        return fired

    def step(self) -> Optional[Event]:
        if self.peek() is None:
            return None
        return self._fire_next()

    def run_until(self, predicate: Callable[[], bool], limit: float = float("inf")) -> bool:
        """Fire events until ``predicate()`` holds or the next event is past ``limit``."""
        while not predicate():
            nxt = self.peek()
            if nxt is None or nxt > limit:
                return predicate()
            self._fire_next()
        return True

    def run_process(self, gen: ProcessGen, name: str = "", limit: float = float("inf")) -> Any:
        proc = self.spawn(gen, name)
        if not self.run_until(lambda: proc.done, limit):
            raise TimeoutError(f"process {name} did not finish by t={limit}")
        return proc.result()

    def sleep(self, delay: float) -> ProcessGen:
        """Process helper: ``yield from clock.sleep(d)``."""
        yield delay
