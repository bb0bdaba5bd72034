"""Monitoring Manager: broadcast-tree heartbeats and failure classification.

A heartbeat probe descends a complete binary tree over the VM indices and
reports ascend it. Every node evaluates the application's health hook while
its children are being probed, so a healthy round costs
``2 * depth * link_latency + hook_cost``.

A parent that gets no answer from a child retries ``probe_retries`` times
(each bounded by ``probe_timeout``), declares the child unreachable and then
probes the child's own children directly, so one dead interior node does not
hide a healthy subtree.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from .clock import Event, VirtualClock
from .errors import EmptyCluster

logger = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_PERIOD = 10.0
DEFAULT_HOOK_TIMEOUT = 1.0


@dataclass(frozen=True)
class BroadcastTree:
    size: int

    @property
    def nodes(self) -> list[int]:
        return list(range(self.size))

    @property
    def root(self) -> int:
        return 0

    def children(self, i: int) -> list[int]:
        return [c for c in (2 * i + 1, 2 * i + 2) if c < self.size]

    @property
    def depth(self) -> int:
        return self.size.bit_length() - 1


def build_tree(n: int) -> BroadcastTree:
    if n < 1:
        raise EmptyCluster("cannot build a broadcast tree over zero nodes")
    return BroadcastTree(n)


@dataclass(frozen=True)
class HealthReport:
    app_id: object
    round: int
    unreachable: frozenset[int] = frozenset()
    unhealthy: frozenset[int] = frozenset()
    roundtrip_time: float = 0.0

    def __post_init__(self):
        if self.unreachable & self.unhealthy:
            raise ValueError("a node cannot be both unreachable and unhealthy")

    @property
    def ok(self) -> bool:
        return not (self.unreachable or self.unhealthy)


class Health(str, enum.Enum):
    Healthy = "Healthy"
    VmFailure = "VmFailure"
    AppFailure = "AppFailure"


def classify(report: HealthReport) -> Health:
    if report.unreachable:
        return Health.VmFailure
    if report.unhealthy:
        return Health.AppFailure
    return Health.Healthy


HookFn = Callable[[int], bool]
Cost = Union[float, Callable[[int], float]]


def heartbeat_round(tree: BroadcastTree, hook: HookFn, link_latency: float, *,
                    reachable: Callable[[int], bool] = lambda i: True,
                    hook_cost: Cost = 0.0, hook_timeout: float = DEFAULT_HOOK_TIMEOUT,
                    probe_timeout: float = 1.0, probe_retries: int = 2,
                    app_id: object = None, round_no: int = 0) -> HealthReport:
    """Run one probe/report round and return what the root reports."""
    cost_of = hook_cost if callable(hook_cost) else (lambda i: hook_cost)
    unreachable: set[int] = set()
    unhealthy: set[int] = set()

    def visit(i: int) -> float:
        cost = cost_of(i)
        if cost > hook_timeout:
            unhealthy.add(i)
            hook_time = hook_timeout
        else:
            hook_time = cost
            if not hook(i):
                unhealthy.add(i)
        return max([hook_time] + [probe(c) for c in tree.children(i)])

    def probe(c: int) -> float:
        if reachable(c):
            return 2 * link_latency + visit(c)
        unreachable.add(c)
        adopted = [probe(g) for g in tree.children(c)]
        return probe_retries * probe_timeout + max(adopted, default=0.0)

    total = visit(tree.root) if reachable(tree.root) else probe(tree.root)
    return HealthReport(app_id, round_no, frozenset(unreachable), frozenset(unhealthy), total)


def roundtrip_law(n: int, link_latency: float, hook_cost: float = 0.0) -> float:
    """Closed form for a fully healthy round: ``2 * floor(log2 n) * L + hook``."""
    return 2 * (n.bit_length() - 1) * link_latency + hook_cost


_PROGRESS = re.compile(r"^progress_within\((\d+)\)$")


def make_hook(name: str, coordinator) -> HookFn:
    """Resolve a named built-in predicate against a running coordinator.

    ``process_alive``: the daemon exists and reports itself healthy.
    ``progress_within(k)``: additionally, the daemon is no more than ``k``
    iterations behind the most advanced one.
    """
    def alive(i: int) -> bool:
        if coordinator is None or coordinator.stopped or i >= len(coordinator.daemons):
            return False
        return coordinator.daemons[i].healthy

    if name == "process_alive":
        return alive
    match = _PROGRESS.match(name)
    if match:
        k = int(match.group(1))

        def progressing(i: int) -> bool:
            if not alive(i):
                return False
            lead = max(d.state.iteration for d in coordinator.daemons)
            return lead - coordinator.daemons[i].state.iteration <= k
        return progressing
    raise ValueError(f"unknown health hook {name!r}")


def check_hook_name(name: str) -> None:
    if name != "process_alive" and not _PROGRESS.match(name):
        raise ValueError(f"unknown health hook {name!r}")


@dataclass
class MonitorConfig:
    period: float = DEFAULT_HEARTBEAT_PERIOD
    # powers of two keep tree-depth arithmetic exact in binary floating point
    link_latency: float = 2.0 ** -7
    hook_cost: float = 2.0 ** -10
    hook_timeout: float = DEFAULT_HOOK_TIMEOUT
    probe_timeout: float = 0.5
    probe_retries: int = 2


@dataclass
class _Actor:
    app_id: object
    started_at: float
    rounds: int = 0
    event: Optional[Event] = None
    active: bool = True
    handled_vms: set = field(default_factory=set)


class MonitoringManager:
    """One heartbeat actor per application.

    ``context(app_id)`` returns ``(vms, coordinator, hook_name)`` when the
    application can be probed right now, else ``None`` (the round is skipped).
    ``on_problem(app_id, report, source)`` is called for every report that
    flags a node.
    """

    def __init__(self, clock: VirtualClock, config: MonitorConfig, context, on_problem,
                 trace: Optional[Callable[..., None]] = None):
        self.clock = clock
        self.config = config
        self.context = context
        self.on_problem = on_problem
        self.trace = trace or (lambda *a: None)
        self.actors: dict[object, _Actor] = {}
        self.reports: list[tuple[float, HealthReport]] = []
        # (app_id, round started, report delivered) per completed heartbeat round
        self.rounds_log: list[tuple[object, float, float]] = []

    def watch(self, app_id) -> None:
        self.unwatch(app_id)
        actor = _Actor(app_id, self.clock.now)
        self.actors[app_id] = actor
        actor.event = self.clock.schedule(self.config.period, self._round, actor,
                                          name=f"heartbeat:{app_id}")

    def unwatch(self, app_id) -> None:
        actor = self.actors.pop(app_id, None)
        if actor is not None:
            actor.active = False
            if actor.event is not None:
                actor.event.cancel()

    def _next_boundary(self, actor: _Actor, after: float) -> float:
        period = self.config.period
        k = int((after - actor.started_at) // period) + 1
        boundary = actor.started_at + k * period
        if boundary <= after + 1e-9:
            boundary += period
        return boundary

    def _round(self, actor: _Actor) -> None:
        if not actor.active:
            return
        ctx = self.context(actor.app_id)
        if ctx is None:
            actor.event = self.clock.schedule_at(self._next_boundary(actor, self.clock.now),
                                                 self._round, actor, name=f"heartbeat:{actor.app_id}")
            return
        vms, coordinator, hook_name = ctx
        cfg = self.config
        actor.rounds += 1
        report = heartbeat_round(
            build_tree(len(vms)), make_hook(hook_name, coordinator), cfg.link_latency,
            reachable=lambda i: vms[i].reachable, hook_cost=cfg.hook_cost,
            hook_timeout=cfg.hook_timeout, probe_timeout=cfg.probe_timeout,
            probe_retries=cfg.probe_retries, app_id=actor.app_id, round_no=actor.rounds,
        )
        actor.event = self.clock.schedule(report.roundtrip_time, self._deliver, actor, report,
                                          self.clock.now, name=f"heartbeat-report:{actor.app_id}")

    def _deliver(self, actor: _Actor, report: HealthReport, started: float) -> None:
        if not actor.active:
            return
        self.reports.append((self.clock.now, report))
        self.rounds_log.append((actor.app_id, started, self.clock.now))
        if not report.ok:
            self.trace(actor.app_id, "heartbeat", classify(report).value,
                       f"unreachable={sorted(report.unreachable)} unhealthy={sorted(report.unhealthy)}")
            self.on_problem(actor.app_id, report, "heartbeat")
        if actor.active:
            # never overlap: the next round starts at the first boundary after this report
            nxt = self._next_boundary(actor, self.clock.now)
            actor.event = self.clock.schedule_at(nxt, self._round, actor,
                                                 name=f"heartbeat:{actor.app_id}")

    def ingest_backend_notification(self, vm_id: str, locate) -> None:
        """Treat a backend failure notification as a report with one unreachable VM.

        ``locate(vm_id)`` maps the VM to ``(app_id, vm_index)`` or raises
        :class:`UnknownVm`.
        """
        app_id, index = locate(vm_id)
        actor = self.actors.get(app_id)
        if actor is None or vm_id in actor.handled_vms:
            return
        actor.handled_vms.add(vm_id)
        report = HealthReport(app_id, actor.rounds, frozenset({index}), frozenset(), 0.0)
        self.reports.append((self.clock.now, report))
        self.trace(app_id, "notification", Health.VmFailure.value, f"vm={vm_id}")
        self.on_problem(app_id, report, "notification")
