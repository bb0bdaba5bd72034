"""Provision Manager: remote command execution on cluster VMs.

Commands are scheduled at most ``max_concurrent`` at a time per call (the
SSH connection limit); with uniform command latency this is exactly
``ceil(n / max_concurrent)`` waves. Open connections are cached per VM when
``reuse`` is on, so the connection setup cost is paid once per VM.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .clock import Signal, VirtualClock
from .cloudsim import VmDescriptor
from .errors import NodeUnreachable
from .netmodel import EXEC, TrafficMeter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RemoteAction:
    name: str
    key: str
    value: object = True

    def apply(self, vm: VmDescriptor) -> None:
        vm.fs[self.key] = self.value
        vm.fs.setdefault("action_log", []).append(self.name)


@dataclass(frozen=True)
class ProvisionScript:
    internal_actions: tuple[RemoteAction, ...] = ()
    user_actions: tuple[RemoteAction, ...] = ()

    @property
    def actions(self) -> tuple[RemoteAction, ...]:
        return self.internal_actions + self.user_actions


@dataclass(frozen=True)
class ConnectionBudget:
    max_concurrent: int = 16
    per_command_latency: float = 2.0
    connection_setup: float = 0.5
    reuse: bool = True

    def __post_init__(self):
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if self.per_command_latency < 0 or self.connection_setup < 0:
            raise ValueError("latencies must be >= 0")

    @property
    def wave_time(self) -> float:
        """One wave on VMs with no open connection."""
        return self.connection_setup + self.per_command_latency


def wave_count(n: int, max_concurrent: int) -> int:
    return math.ceil(n / max_concurrent) if n > 0 else 0


@dataclass
class CommandResult:
    vm_id: str
    ok: bool
    error: Optional[str] = None


@dataclass
class ExecResult:
    results: list[CommandResult] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def failed(self) -> list[str]:
        return [r.vm_id for r in self.results if not r.ok]


class Slots:
    """FIFO counting semaphore on the virtual clock."""

    def __init__(self, clock: VirtualClock, capacity: int):
        self.clock = clock
        self.capacity = capacity
        self.in_use = 0
        self.peak = 0
        self._waiting: deque[Signal] = deque()

    def acquire(self) -> Signal:
        sig = self.clock.signal("slot")
        if self.in_use < self.capacity:
            self._grant(sig)
        else:
            self._waiting.append(sig)
        return sig

    def _grant(self, sig: Signal) -> None:
        self.in_use += 1
        self.peak = max(self.peak, self.in_use)
        sig.fire()

    def release(self) -> None:
        self.in_use -= 1
        if self._waiting:
            self._grant(self._waiting.popleft())


def default_script(checkpoint_dir: str = "/var/cacs/ckpt", period: Optional[float] = None,
                   extra: Sequence[RemoteAction] = ()) -> ProvisionScript:
    internal = (
        RemoteAction("mkdir-checkpoint-dir", "checkpoint_dir", checkpoint_dir),
        RemoteAction("install-monitor-daemon", "monitor_daemon", True),
    )
    user = (RemoteAction("set-checkpoint-period", "checkpoint_period", period),) + tuple(extra)
    return ProvisionScript(internal, user)


class ProvisionManager:
    def __init__(self, clock: VirtualClock, budget: ConnectionBudget = ConnectionBudget(),
                 meter: Optional[TrafficMeter] = None, exec_bytes_per_s: float = 5000.0,
                 global_limit: bool = False):
        self.clock = clock
        self.budget = budget
        self.meter = meter
        self.exec_bytes_per_s = exec_bytes_per_s
        self._connections: set[str] = set()
        self._global = Slots(clock, budget.max_concurrent) if global_limit else None
        self.commands_run = 0

    def forget(self, vms: Sequence[VmDescriptor]) -> None:
        for vm in vms:
            self._connections.discard(vm.vm_id)

    def exec_parallel(self, vms: Sequence[VmDescriptor], script: ProvisionScript,
                      budget: Optional[ConnectionBudget] = None):
        """Process: run ``script`` on every VM; returns :class:`ExecResult`.

        Raises :class:`NodeUnreachable` (carrying the partial results) when a
        VM cannot be reached.
        """
        budget = budget or self.budget
        start = self.clock.now
        results: list[Optional[CommandResult]] = [None] * len(vms)
        local = Slots(self.clock, budget.max_concurrent)
        procs = [self.clock.spawn(self._command(i, vm, script, budget, local, results),
                                  name=f"ssh:{vm.vm_id}")
                 for i, vm in enumerate(vms)]
        for proc in procs:
            yield proc
        out = ExecResult([r for r in results if r is not None], self.clock.now - start)
        if out.failed:
            raise NodeUnreachable(out.failed, out.results)
        return out

    def _command(self, i, vm, script, budget, local: Slots, results):
        yield local.acquire()
        if self._global is not None:
            yield self._global.acquire()
        try:
            if not vm.reachable:
                results[i] = CommandResult(vm.vm_id, False, "unreachable")
                return
            worker = self.meter.start(EXEC, self.exec_bytes_per_s) if self.meter else None
            cost = budget.per_command_latency
            if not (budget.reuse and vm.vm_id in self._connections):
                cost += budget.connection_setup
            yield cost
            if worker is not None:
                self.meter.stop(worker)
            if not vm.reachable:
                results[i] = CommandResult(vm.vm_id, False, "connection lost")
                return
            if budget.reuse:
                self._connections.add(vm.vm_id)
            for action in script.actions:
                action.apply(vm)
            self.commands_run += 1
            results[i] = CommandResult(vm.vm_id, True)
        finally:
            local.release()
            if self._global is not None:
                self._global.release()

    def provision_cluster(self, vms: Sequence[VmDescriptor], script: ProvisionScript):
        """Process: internal then user actions on every VM of ``vms``."""
        result = yield from self.exec_parallel(vms, script)
        logger.debug("provisioned %d VMs in %.3f", len(vms), result.elapsed)
        return result
