"""Cloud Manager and two simulated IaaS backends.

Backends differ only through :class:`BackendProfile` values; nothing outside
this module branches on a backend's name.
"""

from __future__ import annotations

import configparser
import enum
import logging
import random
import zlib
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

from .clock import Signal, VirtualClock
from .errors import ClusterUnavailable, UnknownVm
from .netmodel import POLL, TrafficMeter

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VmTemplate:
    vcpus: int = 1
    memory_mb: int = 2048
    image_name: str = "ubuntu-dmtcp"

    def __post_init__(self):
        if self.vcpus < 1:
            raise ValueError(f"vcpus must be >= 1, got {self.vcpus}")
        if self.memory_mb < 1:
            raise ValueError(f"memory_mb must be >= 1, got {self.memory_mb}")

    def to_dict(self) -> dict:
        return {"vcpus": self.vcpus, "memory_mb": self.memory_mb, "image_name": self.image_name}


class VmStatus(str, enum.Enum):
    BOOTING = "BOOTING"
    UP = "UP"
    UNREACHABLE = "UNREACHABLE"
    RELEASED = "RELEASED"


_ALLOWED = {
    VmStatus.BOOTING: {VmStatus.UP, VmStatus.RELEASED},
    VmStatus.UP: {VmStatus.UNREACHABLE, VmStatus.RELEASED},
    VmStatus.UNREACHABLE: {VmStatus.RELEASED},
    VmStatus.RELEASED: set(),
}


@dataclass(eq=False)
class VmDescriptor:
    vm_id: str
    backend_id: str
    address: str
    template: VmTemplate
    status: VmStatus = VmStatus.BOOTING
    # Per-VM key-value "filesystem" mutated by provisioning commands.
    fs: dict = field(default_factory=dict)

    def set_status(self, status: VmStatus) -> None:
        if status is self.status:
            return
        if status not in _ALLOWED[self.status]:
            raise ValueError(f"{self.vm_id}: {self.status.value} -> {status.value} not allowed")
        self.status = status

    @property
    def reachable(self) -> bool:
        return self.status is VmStatus.UP


@dataclass(eq=False)
class VirtualCluster:
    vms: list[VmDescriptor]
    created_at: float

    def __post_init__(self):
        if not self.vms:
            raise ValueError("a virtual cluster needs at least one VM")
        if len({vm.backend_id for vm in self.vms}) != 1:
            raise ValueError("all VMs of a cluster must share one backend")

    @property
    def backend_id(self) -> str:
        return self.vms[0].backend_id

    @property
    def size(self) -> int:
        return len(self.vms)

    @property
    def up(self) -> bool:
        return all(vm.status is VmStatus.UP for vm in self.vms)


@dataclass(frozen=True)
class BackendProfile:
    name: str
    capacity: int = 128
    vm_boot_latency: float = 20.0
    boot_jitter: float = 0.0
    api_poll_cost: float = 1000.0
    has_failure_notifications: bool = False
    # VMs the IaaS builds at once; None means unlimited.
    alloc_concurrency: Optional[int] = None
    notification_delay: float = 0.0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be >= 0")
        if min(self.vm_boot_latency, self.boot_jitter, self.api_poll_cost, self.notification_delay) < 0:
            raise ValueError("latencies and costs must be >= 0")
        if self.alloc_concurrency is not None and self.alloc_concurrency < 1:
            raise ValueError("alloc_concurrency must be >= 1")


SNOOZE_SIM = BackendProfile(
    name="snooze-sim",
    capacity=128,
    vm_boot_latency=20.0,
    has_failure_notifications=True,
)
OPENSTACK_SIM = BackendProfile(
    name="openstack-sim",
    capacity=128,
    vm_boot_latency=45.0,
    boot_jitter=30.0,
    has_failure_notifications=False,
)
BUILTIN_PROFILES = {p.name: p for p in (SNOOZE_SIM, OPENSTACK_SIM)}

_INI_KEYS = {
    "capacity": ("capacity", int),
    "boot_latency_s": ("vm_boot_latency", float),
    "boot_jitter_s": ("boot_jitter", float),
    "poll_bytes_per_s": ("api_poll_cost", float),
    "alloc_concurrency": ("alloc_concurrency", int),
    "notification_delay_s": ("notification_delay", float),
}


def load_profiles(path_or_text: str, *, is_text: bool = False) -> dict[str, BackendProfile]:
    """Read ``[backend.<name>]`` sections from an INI-style config file.

    Sections naming a built-in profile override its fields; other names start
    from the :class:`BackendProfile` defaults.
    """
    parser = configparser.ConfigParser()
    if is_text:
        parser.read_string(path_or_text)
    else:
        with open(path_or_text) as fh:
            parser.read_file(fh)
    profiles = dict(BUILTIN_PROFILES)
    for section in parser.sections():
        if not section.startswith("backend."):
            continue
        name = section[len("backend."):]
        base = profiles.get(name, BackendProfile(name=name))
        values = {}
        for key, raw in parser[section].items():
            if key == "failure_notifications":
                values["has_failure_notifications"] = parser[section].getboolean(key)
            elif key in _INI_KEYS:
                attr, conv = _INI_KEYS[key]
                values[attr] = conv(raw)
            else:
                raise ValueError(f"unknown backend key {key!r} in [{section}]")
        profiles[name] = replace(base, **values)
    return profiles


class Backend:
    """One simulated IaaS: a fixed pool of VM slots and a build queue."""

    def __init__(self, profile: BackendProfile, clock: VirtualClock, seed: int = 0,
                 meter: Optional[TrafficMeter] = None):
        self.profile = profile
        self.clock = clock
        self.meter = meter
        self.rng = random.Random((seed << 32) ^ zlib.crc32(profile.name.encode()))
        self.vms: dict[str, VmDescriptor] = {}
        self.claimed_total = 0
        self.released_total = 0
        self._next_vm = 0
        self._build_queue: deque = deque()
        self._building = 0
        self._subscribers: list[Callable[[VmDescriptor], None]] = []

    @property
    def name(self) -> str:
        return self.profile.name

    @property
    def live(self) -> int:
        return self.claimed_total - self.released_total

    @property
    def idle(self) -> int:
        return self.profile.capacity - self.live

    def subscribe(self, callback: Callable[[VmDescriptor], None]) -> None:
        """Register a failure-notification consumer (no-op without the capability)."""
        if self.profile.has_failure_notifications:
            self._subscribers.append(callback)

    def create_cluster(self, templates: Sequence[VmTemplate]) -> tuple[VirtualCluster, Signal]:
        templates = list(templates)
        if not templates:
            raise ClusterUnavailable("no VMs requested")
        if len(templates) > self.idle:
            raise ClusterUnavailable(
                f"{self.name}: requested {len(templates)} VMs, {self.idle} idle")
        vms = []
        for template in templates:
            vm_id = f"{self.name}-vm{self._next_vm}"
            self._next_vm += 1
            vm = VmDescriptor(vm_id, self.name, f"{vm_id}.{self.name}.sim:22", template)
            self.vms[vm_id] = vm
            vms.append(vm)
        self.claimed_total += len(vms)
        cluster = VirtualCluster(vms, self.clock.now)
        ready = self.clock.signal(f"up:{vms[0].vm_id}+{len(vms) - 1}")
        poller = self.meter.start(POLL, self.profile.api_poll_cost) if self.meter else None
        pending = {vm.vm_id for vm in vms}

        def booted(vm: VmDescriptor) -> None:
            pending.discard(vm.vm_id)
            if not pending:
                if poller is not None:
                    self.meter.stop(poller)
                ready.fire(cluster)

        for vm in vms:
            self._build_queue.append((vm, booted))
        self._pump()
        logger.debug("%s: claimed %d VMs at t=%s", self.name, len(vms), self.clock.now)
        return cluster, ready

    def _boot_time(self) -> float:
        latency = self.profile.vm_boot_latency
        if self.profile.boot_jitter:
            latency += self.rng.uniform(0.0, self.profile.boot_jitter)
        return latency

    def _pump(self) -> None:
        limit = self.profile.alloc_concurrency
        while self._build_queue and (limit is None or self._building < limit):
            vm, done = self._build_queue.popleft()
            if vm.status is not VmStatus.BOOTING:
                continue
            self._building += 1
            self.clock.schedule(self._boot_time(), self._finish_boot, vm, done,
                                name=f"boot:{vm.vm_id}")

    def _finish_boot(self, vm: VmDescriptor, done) -> None:
        self._building -= 1
        if vm.status is VmStatus.BOOTING:
            vm.set_status(VmStatus.UP)
            done(vm)
        self._pump()

    def release(self, vms: Iterable[VmDescriptor]) -> int:
        released = 0
        for vm in vms:
            if vm.status is VmStatus.RELEASED:
                continue
            vm.set_status(VmStatus.RELEASED)
            vm.fs.clear()
            self.released_total += 1
            released += 1
        return released

    def inject_failure(self, vm_id: str, at: Optional[float] = None) -> None:
        vm = self.vms.get(vm_id)
        if vm is None or vm.status is not VmStatus.UP:
            raise UnknownVm(f"{vm_id} is not an UP VM of {self.name}")
        at = self.clock.now if at is None else at
        self.clock.schedule_at(at, self._fail, vm, name=f"fail:{vm_id}")

    def _fail(self, vm: VmDescriptor) -> None:
        if vm.status is not VmStatus.UP:
            return
        vm.set_status(VmStatus.UNREACHABLE)
        logger.info("%s: %s unreachable at t=%s", self.name, vm.vm_id, self.clock.now)
        for callback in self._subscribers:
            self.clock.schedule(self.profile.notification_delay, callback, vm,
                                name=f"notify:{vm.vm_id}")


class CloudManager:
    """Facade over every configured backend."""

    def __init__(self, clock: VirtualClock, profiles: Iterable[BackendProfile], seed: int = 0,
                 meter: Optional[TrafficMeter] = None):
        self.clock = clock
        self.backends = {p.name: Backend(p, clock, seed, meter) for p in profiles}

    def backend(self, backend_id: str) -> Backend:
        try:
            return self.backends[backend_id]
        except KeyError:
            raise ClusterUnavailable(f"unknown backend {backend_id!r}") from None

    def create_cluster(self, backend_id: str, templates: Sequence[VmTemplate]):
        return self.backend(backend_id).create_cluster(templates)

    def destroy_cluster(self, cluster: Optional[VirtualCluster]) -> int:
        if cluster is None:
            return 0
        return self.backend(cluster.backend_id).release(cluster.vms)

    def release(self, vms: Sequence[VmDescriptor]) -> int:
        return sum(self.backend(vm.backend_id).release([vm]) for vm in vms)

    def find_vm(self, vm_id: str) -> VmDescriptor:
        for backend in self.backends.values():
            if vm_id in backend.vms:
                return backend.vms[vm_id]
        raise UnknownVm(vm_id)

    def inject_failure(self, vm_id: Optional[str] = None, at: Optional[float] = None, *,
                       backend_id: Optional[str] = None, count: int = 1) -> list[str]:
        """Make one VM (or ``count`` seeded-random UP VMs of a backend) unreachable."""
        if vm_id is not None:
            vm = self.find_vm(vm_id)
            self.backend(vm.backend_id).inject_failure(vm_id, at)
            return [vm_id]
        if backend_id is None:
            raise ValueError("give a vm_id or a backend_id")
        backend = self.backend(backend_id)
        up = sorted(v.vm_id for v in backend.vms.values() if v.status is VmStatus.UP)
        if len(up) < count:
            raise UnknownVm(f"{backend_id}: only {len(up)} UP VMs")
        chosen = backend.rng.sample(up, count)
        for vid in chosen:
            backend.inject_failure(vid, at)
        return chosen

    def audit(self) -> dict[str, dict[str, int]]:
        out = {}
        for name, b in self.backends.items():
            statuses = {s.value: 0 for s in VmStatus}
            for vm in b.vms.values():
                statuses[vm.status.value] += 1
            out[name] = {"capacity": b.profile.capacity, "idle": b.idle, "live": b.live,
                         "claimed": b.claimed_total, "released": b.released_total, **statuses}
        return out
