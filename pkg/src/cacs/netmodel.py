"""Service network traffic: the analytic two-term model and an instrumented meter.

Polling workers (waiting for the IaaS front-end to build VMs) and remote-exec
workers (running provisioning commands) each consume a constant bandwidth.
The meter records the bytes those workers actually emit, one emission per
virtual second per active worker, alongside the worker-count change points,
so the two can be cross-checked after a run.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

from .clock import LATE, VirtualClock

POLL = "poll"
EXEC = "exec"


@dataclass(frozen=True)
class NetworkModel:
    m: int
    n: int
    c1: float
    c2: float

    def __post_init__(self):
        if min(self.m, self.n, self.c1, self.c2) < 0:
            raise ValueError("network model parameters must be non-negative")


def traffic(model: NetworkModel) -> float:
    """Bytes per second for ``m`` pollers at ``c1`` and ``n`` exec workers at ``c2``."""
    return model.m * model.c1 + model.n * model.c2


class _Source:
    __slots__ = ("kind", "rate", "active", "event")

    def __init__(self, kind: str, rate: float):
        self.kind = kind
        self.rate = rate
        self.active = True
        self.event = None


class TrafficMeter:
    """Counts bytes emitted by worker sources on a virtual clock.

    A source emits ``rate`` bytes at its start instant and every ``interval``
    after that until stopped. Emissions run at LATE priority so that a source
    stopped at instant t emits nothing at t.
    """

    def __init__(self, clock: VirtualClock, interval: float = 1.0):
        self.clock = clock
        self.interval = interval
        self.emissions: list[tuple[float, str, float]] = []
        self.changes: list[tuple[float, str, int]] = []
        self.active: dict[str, int] = defaultdict(int)

    def start(self, kind: str, rate: float) -> _Source:
        src = _Source(kind, rate)
        self.active[kind] += 1
        self.changes.append((self.clock.now, kind, +1))
        src.event = self.clock.schedule(0.0, self._emit, src, priority=LATE, name=f"emit:{kind}")
        return src

    def stop(self, src: _Source) -> None:
        if not src.active:
            return
        src.active = False
        if src.event is not None:
            src.event.cancel()
        self.active[src.kind] -= 1
        self.changes.append((self.clock.now, src.kind, -1))

    def _emit(self, src: _Source) -> None:
        if not src.active:
            return
        self.emissions.append((self.clock.now, src.kind, src.rate * self.interval))
        src.event = self.clock.schedule(self.interval, self._emit, src, priority=LATE,
                                        name=f"emit:{src.kind}")

    def count_at(self, kind: str, t: float) -> int:
        return sum(d for (when, k, d) in self.changes if k == kind and when <= t)

    def bytes_per_second(self, t: float) -> float:
        """Measured rate over the window ``[t, t + interval)``."""
        lo, hi = t, t + self.interval
        total = sum(b for (when, _, b) in self.emissions if lo <= when < hi)
        return total / self.interval

    def samples(self, t0: float, t1: float) -> list[tuple[float, int, int, float]]:
        """``(t, m, n, measured)`` at every whole interval in ``[t0, t1]``."""
        out = []
        steps = int(math.floor((t1 - t0) / self.interval + 1e-9))
        for k in range(steps + 1):
            t = t0 + k * self.interval
            out.append((t, self.count_at(POLL, t), self.count_at(EXEC, t), self.bytes_per_second(t)))
        return out
