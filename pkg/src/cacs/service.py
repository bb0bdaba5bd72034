"""One checkpointing service instance: configuration and wiring.

Several instances may share a virtual clock (and a remote store), which is
how cross-cloud cloning and migration are exercised in-process.
"""

from __future__ import annotations

import configparser
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Optional

from .appmgr import AppManager
from .ckptstore import CheckpointManager, LocalDirStore, MemoryStore, ObjectStore
from .clock import VirtualClock
from .cloudsim import BUILTIN_PROFILES, BackendProfile, CloudManager, load_profiles
from .errors import UnknownVm
from .gateway import ApiRequest, ApiResponse, CoordinatorsDb, Gateway
from .monitor import MonitorConfig, MonitoringManager
from .netmodel import TrafficMeter
from .pool import WorkerPool
from .provision import ConnectionBudget, ProvisionManager

logger = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    profiles: dict[str, BackendProfile] = field(default_factory=lambda: dict(BUILTIN_PROFILES))
    default_backend: Optional[str] = "snooze-sim"
    seed: int = 0
    pool_capacity: int = 100
    ssh: ConnectionBudget = field(default_factory=ConnectionBudget)
    ssh_global_limit: bool = False
    exec_bytes_per_s: float = 5000.0
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    # seconds an ERROR record stays visible before automatic termination
    error_linger: float = 30.0
    local_root: Optional[str] = None
    local_quota: Optional[int] = None
    local_bandwidth: float = 200e6
    remote_bandwidth: float = 50e6
    keep_generations: Optional[int] = None


_SERVICE_KEYS = {
    "default_backend": str,
    "seed": int,
    "pool_capacity": int,
    "exec_bytes_per_s": float,
    "error_linger_s": float,
    "local_root": str,
    "local_quota_bytes": int,
    "local_bandwidth": float,
    "remote_bandwidth": float,
    "keep_generations": int,
}
_SSH_KEYS = {
    "ssh_max_concurrent": ("max_concurrent", int),
    "ssh_command_latency_s": ("per_command_latency", float),
    "ssh_setup_s": ("connection_setup", float),
}
_MONITOR_KEYS = {
    "heartbeat_period_s": ("period", float),
    "link_latency_s": ("link_latency", float),
    "hook_cost_s": ("hook_cost", float),
    "hook_timeout_s": ("hook_timeout", float),
    "probe_timeout_s": ("probe_timeout", float),
}


def load_config(path: str) -> ServiceConfig:
    """Read a service config: a ``[service]`` section plus ``[backend.<name>]`` sections."""
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser()
    parser.read_string(text)
    cfg = ServiceConfig(profiles=load_profiles(text, is_text=True))
    if not parser.has_section("service"):
        return cfg
    sect = parser["service"]
    ssh, mon = {}, {}
    for key, raw in sect.items():
        if key in _SERVICE_KEYS:
            value = _SERVICE_KEYS[key](raw)
            attr = {"error_linger_s": "error_linger", "local_quota_bytes": "local_quota"}.get(key, key)
            setattr(cfg, attr, value)
        elif key in _SSH_KEYS:
            attr, conv = _SSH_KEYS[key]
            ssh[attr] = conv(raw)
        elif key == "ssh_reuse":
            ssh["reuse"] = sect.getboolean(key)
        elif key == "ssh_global_limit":
            cfg.ssh_global_limit = sect.getboolean(key)
        elif key in _MONITOR_KEYS:
            attr, conv = _MONITOR_KEYS[key]
            mon[attr] = conv(raw)
        else:
            raise ValueError(f"unknown [service] key {key!r}")
    cfg.ssh = replace(cfg.ssh, **ssh)
    cfg.monitor = replace(cfg.monitor, **mon)
    return cfg


class Service:
    def __init__(self, config: Optional[ServiceConfig] = None, *, clock: Optional[VirtualClock] = None,
                 name: str = "cacs", remote: Optional[ObjectStore] = None,
                 meter: Optional[TrafficMeter] = None):
        self.config = config or ServiceConfig()
        self.name = name
        self.clock = clock or VirtualClock()
        self.meter = meter if meter is not None else TrafficMeter(self.clock)
        # serializes API calls against whoever drives the clock
        self.lock = threading.RLock()
        self.trace_log: list[str] = []
        cfg = self.config
        self.cloud = CloudManager(self.clock, cfg.profiles.values(), cfg.seed, self.meter)
        self.provision = ProvisionManager(self.clock, cfg.ssh, self.meter, cfg.exec_bytes_per_s,
                                          cfg.ssh_global_limit)
        if cfg.local_root:
            local = LocalDirStore(cfg.local_root, cfg.local_bandwidth, cfg.local_quota)
        else:
            local = MemoryStore(cfg.local_bandwidth, cfg.local_quota)
        if remote is None:
            remote = MemoryStore(cfg.remote_bandwidth)
        self.ckpt = CheckpointManager(self.clock, local, remote, namespace=name,
                                      keep_generations=cfg.keep_generations)
        self.db = CoordinatorsDb(self.ckpt.index)
        self.pool = WorkerPool(self.clock, cfg.pool_capacity)
        self.appmgr = AppManager(self)
        self.monitor = MonitoringManager(self.clock, cfg.monitor, self._monitor_context,
                                         self.appmgr.on_problem, self.trace)
        self.gateway = Gateway(self)
        for backend in self.cloud.backends.values():
            backend.subscribe(self._notification)

    # -- tracing ----------------------------------------------------------------

    def trace(self, app_id, source: str, event: str, detail: str = "") -> None:
        line = f"{self.clock.now:12.6f} {self.name} app={app_id} {source} {event}"
        if detail:
            line += f" {detail}"
        self.trace_log.append(line)
        logger.debug(line)

    def events(self, app_id=None, source: Optional[str] = None) -> list[str]:
        out = []
        for line in self.trace_log:
            if app_id is not None and f" app={app_id} " not in line:
                continue
            if source is not None and f" {source} " not in line:
                continue
            out.append(line)
        return out

    # -- monitor glue -------------------------------------------------------------

    def _monitor_context(self, app_id):
        rec = self.db.get(app_id)
        coord = self.appmgr.coordinators.get(app_id)
        if rec is None or rec.cluster is None or coord is None or self.pool.busy(app_id):
            return None
        return rec.cluster.vms, coord, rec.asr.health_hook

    def locate_vm(self, vm_id: str) -> tuple[int, int]:
        for rec in self.db.list():
            if rec.cluster is None:
                continue
            for i, vm in enumerate(rec.cluster.vms):
                if vm.vm_id == vm_id:
                    return rec.app_id, i
        raise UnknownVm(f"{vm_id} belongs to no application")

    def _notification(self, vm) -> None:
        try:
            self.monitor.ingest_backend_notification(vm.vm_id, self.locate_vm)
        except UnknownVm:
            logger.debug("notification for unowned VM %s", vm.vm_id)

    # -- API and clock -----------------------------------------------------------

    def handle(self, request: ApiRequest) -> ApiResponse:
        return self.gateway.handle(request)

    def request(self, method: str, path: str, body=None) -> ApiResponse:
        return self.handle(ApiRequest(method, path, body))

    def advance(self, dt: float) -> None:
        with self.lock:
            self.clock.advance(self.clock.now + dt)

    def advance_to(self, t: float) -> None:
        with self.lock:
            self.clock.advance(t)

    def run_until(self, predicate, limit: float = float("inf")) -> bool:
        with self.lock:
            return self.clock.run_until(predicate, limit)

    def idle(self) -> bool:
        return self.pool.active == 0 and not self.pool.queue

    def drain(self, limit: float = float("inf")) -> bool:
        """Run until the worker pool has nothing left to do."""
        return self.run_until(self.idle, limit)

    def state(self, app_id: int) -> Optional[str]:
        rec = self.db.get(app_id)
        return rec.state.value if rec else None

    def live_apps(self) -> int:
        return len(self.db)

    def audit(self) -> dict:
        """VM accounting: backend live counts against VMs held by applications."""
        held = sum(len(v) for v in self.appmgr.held.values())
        backends = self.cloud.audit()
        return {"held": held, "live": sum(b["live"] for b in backends.values()),
                "backends": backends}
