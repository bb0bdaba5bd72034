"""Experiment harness: the built-in scenarios, run in virtual time.

Each scenario builds fresh seeded services, drives them through the public
API, and returns a :class:`MetricReport`. A scenario raises
:class:`ScenarioFailed` on the first property it observes to be violated.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

from .ckptstore import MemoryStore
from .client import InProcessClient, clone_via_api
from .clock import VirtualClock
from .cloudsim import BUILTIN_PROFILES, BackendProfile
from .errors import ScenarioFailed
from .monitor import MonitorConfig, roundtrip_law
from .netmodel import EXEC, POLL, NetworkModel, traffic
from .provision import ConnectionBudget, wave_count
from .service import Service, ServiceConfig

POWERS_128 = [2 ** k for k in range(8)]
POWERS_1024 = [2 ** k for k in range(11)]


@dataclass
class MetricReport:
    scenario: str
    params: dict
    seed: int
    rows: list[tuple[float, str, float, Optional[float]]] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, t: float, series: str, value: float, x: Optional[float] = None) -> None:
        for prev_t, prev_series, _, _ in reversed(self.rows):
            if prev_series == series:
                if t < prev_t:
                    raise ValueError(f"series {series!r} went back in time: {t} < {prev_t}")
                break
        self.rows.append((t, series, value, x))

    def series(self, name: str) -> list[tuple[float, float, Optional[float]]]:
        return [(t, v, x) for t, s, v, x in self.rows if s == name]

    def series_names(self) -> list[str]:
        return list(dict.fromkeys(s for _, s, _, _ in self.rows))

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "params": self.params, "seed": self.seed,
                "summary": self.summary}

    def write(self, out: str | Path, plot: bool = True) -> dict[str, Path]:
        """Write ``<stem>.csv``, ``<stem>.json`` and (optionally) ``<stem>.png``."""
        out = Path(out)
        stem = out.with_suffix("") if out.suffix in (".csv", ".json", ".png") else out
        stem.parent.mkdir(parents=True, exist_ok=True)
        paths = {"csv": stem.with_suffix(".csv"), "json": stem.with_suffix(".json")}
        with open(paths["csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "series", "x", "value"])
            for t, s, v, x in self.rows:
                writer.writerow([repr(float(t)), s, "" if x is None else x, repr(float(v))])
        paths["json"].write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        if plot:
            from .plotting import plot_report
            paths["png"] = plot_report(self, stem.with_suffix(".png"))
        return paths


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ScenarioFailed(message)


def _workload(n: int, state_bytes: int, iterations: int = 10 ** 6, seed: int = 0,
              iteration_seconds: float = 1.0) -> dict:
    return {"kind": "ring_sum" if n >= 2 else "single_counter", "iterations": iterations,
            "state_bytes_total": state_bytes, "seed": seed, "iteration_seconds": iteration_seconds}


def _asr(n: int, app_spec: dict, policy: dict, backend: Optional[str] = None) -> dict:
    doc = {"vm_templates": [{"count": n}], "app_spec": app_spec, "checkpoint_policy": policy}
    if backend is not None:
        doc["backend_id"] = backend
    return doc


def _call(svc: Service, method: str, path: str, body=None) -> dict:
    resp = svc.request(method, path, body)
    _require(resp.status < 400, f"{method} {path} -> {resp.status} {resp.body}")
    return resp.body


def _wait(svc: Service, pred: Callable[[], bool], what: str, horizon: float = 10_000.0) -> None:
    _require(svc.run_until(pred, svc.clock.now + horizon), f"timed out waiting for {what}")


def _phase(svc: Service, app_id: int, phase: str) -> float:
    times = [p.elapsed for p in svc.appmgr.timings if p.app_id == app_id and p.phase == phase]
    _require(bool(times), f"app {app_id} recorded no {phase} phase")
    return times[-1]


# -- scaling / compare -------------------------------------------------------------


def _scaling_on(report: MetricReport, backend: str, ns, seed: int, state_bytes: int,
                budget: ConnectionBudget, prefix: str = "") -> dict:
    svc = Service(ServiceConfig(default_backend=backend, seed=seed, ssh=budget))
    table = {}
    user = {"mode": "user"}
    for n in ns:
        t0 = svc.clock.now
        app_id = _call(svc, "POST", "/coordinators", _asr(n, _workload(n, state_bytes, seed=seed), user))["id"]
        _wait(svc, lambda: svc.state(app_id) == "RUNNING" and svc.idle(), f"n={n} to run")
        row = {"submit_s": svc.clock.now - t0,
               "allocate_s": _phase(svc, app_id, "allocate"),
               "provision_s": _phase(svc, app_id, "provision")}
        _call(svc, "POST", f"/coordinators/{app_id}/checkpoints")
        _wait(svc, svc.idle, f"n={n} checkpoint")
        row["checkpoint_s"] = _phase(svc, app_id, "checkpoint")
        gen = _call(svc, "GET", f"/coordinators/{app_id}/checkpoints")["checkpoints"][-1]["id"]
        _call(svc, "POST", f"/coordinators/{app_id}/checkpoints/{gen}")
        _wait(svc, svc.idle, f"n={n} restart")
        row["restart_s"] = _phase(svc, app_id, "restart")
        row["image_bytes"] = svc.ckpt.select_image(app_id, gen).images[0].size_bytes
        for key, value in row.items():
            report.add(svc.clock.now, f"{prefix}{key}", value, n)
        _call(svc, "DELETE", f"/coordinators/{app_id}")
        _wait(svc, svc.idle, f"n={n} termination")
        _require(svc.audit()["live"] == 0, f"n={n}: VMs leaked after termination")
        table[n] = row

    # provisioning knee: one wave per max_concurrent VMs, fresh connections
    wave = budget.wave_time
    for n, row in table.items():
        expected = wave_count(n, budget.max_concurrent) * wave
        _require(row["provision_s"] == expected,
                 f"{backend}: provision({n}) = {row['provision_s']}, expected {expected}")
    return {str(n): row for n, row in table.items()}


def run_scaling(params: dict, seed: int) -> MetricReport:
    ns = params.get("ns", POWERS_128)
    backend = params.get("backend", "snooze-sim")
    budget = ConnectionBudget(**params.get("ssh", {}))
    report = MetricReport("scaling", {"ns": ns, "backend": backend}, seed)
    report.summary["phases"] = _scaling_on(report, backend, ns, seed,
                                           params.get("state_bytes", 8 << 20), budget)
    report.summary["ssh_max_concurrent"] = budget.max_concurrent
    return report


def run_compare(params: dict, seed: int) -> MetricReport:
    ns = params.get("ns", POWERS_128)
    backends = params.get("backends", ["snooze-sim", "openstack-sim"])
    budget = ConnectionBudget(**params.get("ssh", {}))
    report = MetricReport("compare", {"ns": ns, "backends": backends}, seed)
    for backend in backends:
        report.summary[backend] = _scaling_on(report, backend, ns, seed,
                                              params.get("state_bytes", 8 << 20), budget,
                                              prefix=f"{backend}/")
    return report


# -- heartbeat ------------------------------------------------------------------------


def run_heartbeat(params: dict, seed: int) -> MetricReport:
    ns = params.get("ns", POWERS_1024)
    base = MonitorConfig()
    link = float(params.get("link_latency", base.link_latency))
    hook = float(params.get("hook_cost", base.hook_cost))
    profile = BackendProfile("hb-sim", capacity=max(ns), vm_boot_latency=1.0)
    cfg = ServiceConfig(profiles={**BUILTIN_PROFILES, profile.name: profile},
                        default_backend=profile.name, seed=seed,
                        monitor=replace(base, link_latency=link, hook_cost=hook))
    svc = Service(cfg)
    report = MetricReport("heartbeat", {"ns": ns, "link_latency": link, "hook_cost": hook}, seed)
    measured = {}
    for n in ns:
        app_id = _call(svc, "POST", "/coordinators",
                       _asr(n, _workload(n, 64 * n, seed=seed), {"mode": "user"}))["id"]
        _wait(svc, lambda: any(a == app_id for a, _, _ in svc.monitor.rounds_log),
              f"first heartbeat of n={n}")
        _, started, delivered = next(r for r in svc.monitor.rounds_log if r[0] == app_id)
        measured[n] = delivered - started
        report.add(delivered, "roundtrip_s", measured[n], n)
        report.add(delivered, "law_s", roundtrip_law(n, link, hook), n)
        _call(svc, "DELETE", f"/coordinators/{app_id}")
        _wait(svc, svc.idle, f"termination of n={n}")

    for n, rt in measured.items():
        _require(rt == roundtrip_law(n, link, hook),
                 f"roundtrip({n}) = {rt}, law gives {roundtrip_law(n, link, hook)}")
    deltas = [measured[b] - measured[a] for a, b in zip(ns, ns[1:]) if b == 2 * a]
    _require(all(d == 2 * link for d in deltas), f"power-of-two deltas not constant: {deltas}")
    report.summary.update({"roundtrip_s": {str(n): v for n, v in measured.items()},
                           "doubling_delta_s": deltas[0] if deltas else None})
    return report


# -- burst100 ------------------------------------------------------------------------


def burst_profile(c1: float) -> BackendProfile:
    # The front-end builds one VM at a time, every boot_latency seconds.
    return BackendProfile("burst-sim", capacity=128, vm_boot_latency=2.0, api_poll_cost=c1,
                          alloc_concurrency=1)


def _r_squared(xs, ys) -> float:
    if len(set(ys)) <= 1:
        return 1.0
    return statistics.correlation(xs, ys) ** 2


def run_burst100(params: dict, seed: int) -> MetricReport:
    apps = int(params.get("apps", 100))
    c1 = float(params.get("c1", 1000.0))
    c2 = float(params.get("c2", 5000.0))
    profile = burst_profile(c1)
    cfg = ServiceConfig(profiles={**BUILTIN_PROFILES, profile.name: profile},
                        default_backend=profile.name, seed=seed, pool_capacity=100,
                        ssh=ConnectionBudget(max_concurrent=16, per_command_latency=2.0,
                                             connection_setup=0.0),
                        exec_bytes_per_s=c2)
    svc = Service(cfg)
    report = MetricReport("burst100", {"apps": apps, "c1": c1, "c2": c2}, seed)
    ids: list[int] = []

    def submit() -> None:
        ids.append(_call(svc, "POST", "/coordinators",
                         _asr(1, _workload(1, 4096, seed=seed), {"mode": "user"}))["id"])

    for k in range(apps):
        svc.clock.schedule_at(float(k), submit, name=f"submit:{k}")
    last_submit = float(apps - 1)
    _wait(svc, lambda: len(ids) == apps and all(svc.state(i) == "RUNNING" for i in ids),
          "every burst app to run")
    end = math.ceil(svc.clock.now) + 2.0
    svc.advance_to(end)

    meter = svc.meter
    pool_hist = svc.pool.history
    samples = meter.samples(0.0, end - 1.0)
    mismatches = []
    for t, m, n, measured in samples:
        model = traffic(NetworkModel(m, n, c1, c2))
        active = [a for (when, a) in pool_hist if when <= t][-1]
        report.add(t, "m_pollers", m)
        report.add(t, "n_exec", n)
        report.add(t, "measured_Bps", measured)
        report.add(t, "model_Bps", model)
        report.add(t, "pool_active", active)
        if measured != model:
            mismatches.append((t, measured, model))
    _require(not mismatches, f"meter disagrees with m*c1+n*c2 at {mismatches[:3]}")

    drained = [t for t, m, _, _ in samples if t >= last_submit and m == 0]
    _require(bool(drained), "pollers never drained")
    window = [(t, v) for t, m, _, v in samples if last_submit <= t <= drained[0]]
    xs, ys = [t for t, _ in window], [v for _, v in window]
    fit = statistics.linear_regression(xs, ys)
    r2 = _r_squared(xs, ys)
    _require(fit.slope < 0, f"post-submission traffic slope {fit.slope} is not negative")
    _require(r2 >= 0.99, f"post-submission R^2 = {r2:.4f} < 0.99")
    _require(svc.pool.peak <= cfg.pool_capacity, "worker pool exceeded its capacity")
    report.summary.update({
        "samples": len(samples), "exact_matches": len(samples) - len(mismatches),
        "window": [xs[0], xs[-1]], "slope_Bps_per_s": fit.slope, "intercept": fit.intercept,
        "r_squared": r2, "peak_pollers": max(m for _, m, _, _ in samples),
        "peak_pool_active": svc.pool.peak, "pool_capacity": cfg.pool_capacity,
        "poll_kind": POLL, "exec_kind": EXEC,
    })
    return report


# -- migrate40 ---------------------------------------------------------------------


def _prefix_bytes(store, prefix: str) -> int:
    return sum(len(store.peek(k) or b"") for k in store.list(prefix))


def run_migrate40(params: dict, seed: int) -> MetricReport:
    apps = int(params.get("apps", 40))
    state_bytes = int(params.get("state_bytes", 3_000_000))
    period = float(params.get("period", 60.0))
    submit_every = float(params.get("submit_interval", 1.0))
    clone_every = float(params.get("clone_interval", 1.0))
    hold = float(params.get("hold", 30.0))
    clock = VirtualClock()
    remote = MemoryStore(bandwidth=float(params.get("remote_bandwidth", 50e6)))
    keep = int(params.get("keep_generations", 1))
    src = Service(ServiceConfig(default_backend="snooze-sim", seed=seed, keep_generations=keep),
                  clock=clock, name="snooze", remote=remote)
    dst = Service(ServiceConfig(default_backend="openstack-sim", seed=seed, keep_generations=keep),
                  clock=clock, name="openstack", remote=remote)
    report = MetricReport("migrate40", {"apps": apps, "state_bytes": state_bytes, "period": period,
                                        "submit_interval": submit_every,
                                        "clone_interval": clone_every}, seed)
    last_io = [0]

    def sample() -> None:
        now = clock.now
        io = remote.bytes_written + remote.bytes_read
        report.add(now, "live_source", len(src.db))
        report.add(now, "live_target", len(dst.db))
        report.add(now, "stored_remote_bytes", remote.used_bytes())
        report.add(now, "stored_source_local_bytes", src.ckpt.local.used_bytes())
        report.add(now, "stored_target_local_bytes", dst.ckpt.local.used_bytes())
        report.add(now, "storage_io_Bps", io - last_io[0])
        last_io[0] = io
        clock.schedule(1.0, sample, name="sample")

    clock.schedule_at(0.0, sample, name="sample")
    spec = _workload(1, state_bytes, iterations=10 ** 9, seed=seed)
    policy = {"mode": "periodic", "period": period}
    sources: list[int] = []

    def submit() -> None:
        sources.append(_call(src, "POST", "/coordinators", _asr(1, spec, policy))["id"])

    for k in range(apps):
        clock.schedule_at(k * submit_every, submit, name=f"submit:{k}")
    _wait(src, lambda: len(sources) == apps and all(src.ckpt.list(a) for a in sources),
          "a first checkpoint of every source app")
    t_clone = clock.now
    clones: dict[int, int] = {}

    def clone(app_id: int) -> None:
        clones[app_id] = clone_via_api(InProcessClient(src), app_id, InProcessClient(dst),
                                       backend_id="openstack-sim")

    for k, app_id in enumerate(sources):
        clock.schedule(k * clone_every, clone, app_id, name=f"clone:{app_id}")
    _wait(src, lambda: len(clones) == apps
          and all(dst.state(c) == "RUNNING" for c in clones.values()) and dst.idle(),
          "every clone to run")
    t_both = clock.now
    live_both = len(src.db) + len(dst.db)
    _require(live_both == 2 * apps, f"{live_both} live applications, expected {2 * apps}")
    src.advance(hold)

    for app_id in sources:
        src.appmgr.terminate(app_id)
    _wait(src, src.idle, "source terminations")
    t_migrated = clock.now
    _require(len(src.db) == 0, f"{len(src.db)} applications left on the source")
    _require(src.audit()["live"] == 0, "source VMs not released")
    _require(_prefix_bytes(remote, "snooze/") == 0, "source images left in shared storage")
    live_target = len(dst.db)
    src.advance(hold)

    for app_id in list(dst.db.ids()):
        dst.appmgr.terminate(app_id)
    _wait(dst, dst.idle, "target terminations")
    src.advance(2.0)
    _require(dst.audit()["live"] == 0 and remote.used_bytes() == 0, "target teardown incomplete")
    report.summary.update({
        "live_before_termination": live_both, "live_source_after": len(src.db),
        "live_target_after_migration": live_target, "clone_phase_start": t_clone,
        "all_running_at": t_both, "migrated_at": t_migrated,
        "peak_stored_remote_bytes": max(v for _, v, _ in report.series("stored_remote_bytes")),
    })
    return report


SCENARIOS: dict[str, Callable[[dict, int], MetricReport]] = {
    "scaling": run_scaling,
    "burst100": run_burst100,
    "heartbeat": run_heartbeat,
    "migrate40": run_migrate40,
    "compare": run_compare,
}


def run_experiment(name: str, params: Optional[dict] = None, seed: int = 0) -> MetricReport:
    try:
        scenario = SCENARIOS[name]
    except KeyError:
        raise ScenarioFailed(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
    return scenario(dict(params or {}), seed)
