"""Application Manager: submission, checkpoint, restart, recovery, cloning,
migration and termination.

Every multi-step operation is a process on the service's worker pool, keyed
by application id, so operations on one application never interleave.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

from . import workerrt
from .ckptstore import CheckpointSet
from .cloudsim import VirtualCluster, VmDescriptor
from .errors import (CacsError, Conflict, NoCheckpoint, NodeUnreachable,
                     QuiesceTimeout, RemoteUnavailable, StorageFull, UnknownApp)
from .lifecycle import AppEvent, ApplicationRecord, AppState, AppSubmissionRequest
from .monitor import Health, HealthReport, classify
from .provision import ProvisionScript, RemoteAction, default_script

if TYPE_CHECKING:
    from .service import Service

logger = logging.getLogger(__name__)

CHECKPOINT_SCRIPT = ProvisionScript(user_actions=(RemoteAction("dmtcp-checkpoint", "last_checkpoint"),))
RESTART_SCRIPT = ProvisionScript(user_actions=(RemoteAction("dmtcp-restart", "last_restart"),))


class RecoveryKind(str, enum.Enum):
    VmFailure = "VmFailure"
    AppFailure = "AppFailure"


@dataclass(frozen=True)
class RecoveryPlan:
    kind: RecoveryKind
    failed_vms: tuple[VmDescriptor, ...]
    checkpoint: CheckpointSet

    def __post_init__(self):
        if bool(self.failed_vms) != (self.kind is RecoveryKind.VmFailure):
            raise ValueError("failed_vms must be non-empty exactly for VM failures")


@dataclass
class PhaseTiming:
    app_id: int
    phase: str
    start: float
    end: float

    @property
    def elapsed(self) -> float:
        return self.end - self.start


class AppManager:
    def __init__(self, service: "Service"):
        self.svc = service
        self.coordinators: dict[int, workerrt.Coordinator] = {}
        # every VM an application currently holds, including ones still booting
        self.held: dict[int, list[VmDescriptor]] = {}
        self.timings: list[PhaseTiming] = []
        self.recoveries: list[tuple[float, int, RecoveryPlan]] = []
        self.coordinator_history: dict[int, list[str]] = {}

    # -- helpers ---------------------------------------------------------------

    @property
    def clock(self):
        return self.svc.clock

    def _record(self, app_id: int) -> ApplicationRecord:
        rec = self.svc.db.get(app_id)
        if rec is None:
            raise UnknownApp(f"no application {app_id}")
        return rec

    def _apply(self, rec: ApplicationRecord, event: AppEvent) -> None:
        before = rec.state
        rec.apply(event, self.clock.now)
        self.svc.trace(rec.app_id, "lifecycle", event.value, f"{before.value}->{rec.state.value}")

    def _timed(self, app_id: int, phase: str, start: float) -> None:
        self.timings.append(PhaseTiming(app_id, phase, start, self.clock.now))

    def _fail(self, rec: ApplicationRecord, exc: BaseException) -> None:
        rec.error = f"{type(exc).__name__}: {exc}"
        self._stop_workload(rec.app_id)
        self.svc.monitor.unwatch(rec.app_id)
        if rec.state is not AppState.TERMINATING:
            self._apply(rec, AppEvent.FatalError)
            self.clock.schedule(self.svc.config.error_linger, self._auto_terminate, rec.app_id,
                                name=f"auto-terminate:{rec.app_id}")

    def _auto_terminate(self, app_id: int) -> None:
        rec = self.svc.db.get(app_id)
        if rec is not None and rec.state is AppState.ERROR:
            self.terminate(app_id)

    def _stop_workload(self, app_id: int) -> None:
        coord = self.coordinators.pop(app_id, None)
        if coord is not None:
            coord.stop()

    def _claim(self, rec: ApplicationRecord, templates) -> VirtualCluster:
        """Process: claim VMs and wait until they are all UP."""
        start = self.clock.now
        cluster, ready = self.svc.cloud.create_cluster(rec.asr.backend_id, templates)
        self.held.setdefault(rec.app_id, []).extend(cluster.vms)
        self.svc.trace(rec.app_id, "cloud", "claim", " ".join(vm.vm_id for vm in cluster.vms))
        yield ready
        self._timed(rec.app_id, "allocate", start)
        return cluster

    def _provision(self, rec: ApplicationRecord, vms: Sequence[VmDescriptor]):
        start = self.clock.now
        period = rec.asr.checkpoint_policy.period
        yield from self.svc.provision.provision_cluster(vms, default_script(period=period))
        self._timed(rec.app_id, "provision", start)

    def _alive(self, cluster: VirtualCluster):
        return [lambda vm=vm: vm.reachable for vm in cluster.vms]

    def _incarnation(self, app_id: int) -> tuple[str, int]:
        return f"{self.svc.name}-{app_id}", len(self.coordinator_history.get(app_id, ())) + 1

    def _run(self, rec: ApplicationRecord, coord: workerrt.Coordinator) -> None:
        app_id = rec.app_id
        self.coordinators[app_id] = coord
        rec.coordinator_id = coord.coordinator_id
        self.coordinator_history.setdefault(app_id, []).append(coord.coordinator_id)
        coord.attach(self.clock, rec.asr.checkpoint_policy,
                     on_checkpoint=lambda reason: self.request_checkpoint(app_id, reason),
                     on_finish=lambda c: self._finished(app_id, c),
                     iteration_seconds=rec.asr.app_spec.iteration_seconds)
        self.svc.monitor.watch(app_id)
        self.svc.trace(app_id, "workerrt", "coordinator", coord.coordinator_id)

    def _finished(self, app_id: int, coord: workerrt.Coordinator) -> None:
        rec = self.svc.db.get(app_id)
        if rec is None or self.coordinators.get(app_id) is not coord:
            return
        rec.finished = True
        rec.output = coord.output()
        self.svc.monitor.unwatch(app_id)
        self.svc.trace(app_id, "workerrt", "finished", f"output={rec.output}")

    # -- submission --------------------------------------------------------------

    def submit(self, asr: AppSubmissionRequest, start: bool = True) -> int:
        rec = self.svc.db.create(asr, self.clock.now)
        self.svc.trace(rec.app_id, "appmgr", "submitted",
                       f"backend={asr.backend_id} vms={len(asr.vm_templates)}")
        if start:
            self.svc.pool.submit(rec.app_id, lambda: self._launch(rec.app_id), name=f"launch:{rec.app_id}")
        return rec.app_id

    def _launch(self, app_id: int):
        rec = self._record(app_id)
        try:
            cluster = yield from self._claim(rec, rec.asr.vm_templates)
            rec.cluster = cluster
            self._apply(rec, AppEvent.VmsAllocated)
            yield from self._provision(rec, cluster.vms)
            self._apply(rec, AppEvent.ProvisionDone)
            coord = workerrt.start(cluster.size, rec.asr.app_spec, self._alive(cluster),
                                   *self._incarnation(app_id))
            self._apply(rec, AppEvent.StartCommand)
            self._run(rec, coord)
        except CacsError as exc:
            self._fail(rec, exc)

    # -- checkpoint --------------------------------------------------------------

    def request_checkpoint(self, app_id: int, reason: str = "user",
                           generation: Optional[int] = None) -> None:
        if reason != "user" and any(n.startswith("checkpoint:") for n in self.svc.pool.queued_names(app_id)):
            return  # at most one checkpoint in flight per application
        self.svc.pool.submit(app_id, lambda: self._checkpoint(app_id, reason, generation),
                             name=f"checkpoint:{app_id}")

    def _checkpoint(self, app_id: int, reason: str, generation: Optional[int]):
        rec = self.svc.db.get(app_id)
        coord = self.coordinators.get(app_id)
        if rec is None or rec.state is not AppState.RUNNING or coord is None or coord.finished:
            self.svc.trace(app_id, "ckpt", "skipped", reason)
            return None
        start = self.clock.now
        try:
            blobs = coord.checkpoint()
            yield from self.svc.provision.exec_parallel(rec.cluster.vms, CHECKPOINT_SCRIPT)
            yield self.svc.ckpt.local.transfer_time(max(len(b) for b in blobs))
            ckpt = self.svc.ckpt.store_local(app_id, blobs, generation=generation, source=reason)
        except (QuiesceTimeout, NodeUnreachable, StorageFull, RemoteUnavailable) as exc:
            # the application keeps running; the checkpoint is simply lost
            self.svc.trace(app_id, "ckpt", "failed", f"{type(exc).__name__}: {exc}")
            return None
        self._timed(app_id, "checkpoint", start)
        self.svc.trace(app_id, "ckpt", "stored",
                       f"gen={ckpt.generation} reason={reason} bytes={ckpt.size_bytes}")
        return ckpt.generation

    # -- restart / recovery --------------------------------------------------------

    def restart(self, app_id: int, checkpoint_id: Optional[int] = None) -> None:
        """Queue a restart from ``checkpoint_id`` (latest when omitted)."""
        rec = self._record(app_id)
        self.svc.ckpt.select_image(app_id, checkpoint_id)
        if not self.restartable(rec):
            raise Conflict(f"app {app_id} cannot restart in state {rec.state.value}")
        self.svc.pool.submit(app_id, lambda: self._restart(app_id, checkpoint_id, None),
                             name=f"restart:{app_id}")

    def restartable(self, rec: ApplicationRecord) -> bool:
        if rec.state is AppState.RUNNING:
            return True
        return (rec.state is AppState.CREATING and rec.cluster is None
                and not self.svc.pool.busy(rec.app_id))

    def recover(self, app_id: int, report: HealthReport) -> Optional[RecoveryPlan]:
        """Plan and queue recovery for a report that flags at least one node."""
        health = classify(report)
        if health is Health.Healthy:
            raise ValueError("recover() called with a healthy report")
        rec = self._record(app_id)
        try:
            ckpt = self.svc.ckpt.select_image(app_id)
        except NoCheckpoint as exc:
            self.svc.trace(app_id, "recovery", "no-checkpoint", health.value)
            self._fail(rec, exc)
            return None
        if health is Health.VmFailure:
            failed = tuple(rec.cluster.vms[i] for i in sorted(report.unreachable))
            plan = RecoveryPlan(RecoveryKind.VmFailure, failed, ckpt)
        else:
            plan = RecoveryPlan(RecoveryKind.AppFailure, (), ckpt)
        self.recoveries.append((self.clock.now, app_id, plan))
        self.svc.trace(app_id, "recovery", "plan",
                       f"{plan.kind.value} failed={[vm.vm_id for vm in plan.failed_vms]} gen={ckpt.generation}")
        self._stop_workload(app_id)
        self.svc.monitor.unwatch(app_id)
        self.svc.pool.submit(app_id, lambda: self._restart(app_id, ckpt.generation, plan),
                             name=f"recover:{app_id}")
        return plan

    def on_problem(self, app_id: int, report: HealthReport, source: str) -> None:
        rec = self.svc.db.get(app_id)
        if rec is None or rec.state is not AppState.RUNNING or rec.finished:
            return
        if any(n.startswith(("recover:", "restart:")) for n in self.svc.pool.queued_names(app_id)):
            return
        self.recover(app_id, report)

    def _restart(self, app_id: int, checkpoint_id: Optional[int], plan: Optional[RecoveryPlan]):
        rec = self.svc.db.get(app_id)
        if rec is None or rec.state in (AppState.TERMINATING, AppState.ERROR):
            return
        start = self.clock.now
        try:
            ckpt = self.svc.ckpt.select_image(app_id, checkpoint_id)
            blobs = self.svc.ckpt.restore(ckpt)
            self._stop_workload(app_id)
            self.svc.monitor.unwatch(app_id)
            if rec.cluster is None:
                # clone/migration path: a whole new virtual cluster
                cluster = yield from self._claim(rec, rec.asr.vm_templates)
                rec.cluster = cluster
                self._apply(rec, AppEvent.VmsAllocated)
                yield from self._provision(rec, cluster.vms)
                self._apply(rec, AppEvent.ProvisionDone)
                finish = AppEvent.StartCommand
            else:
                dead = [i for i, vm in enumerate(rec.cluster.vms) if not vm.reachable]
                if dead:
                    yield from self._replace_vms(rec, dead)
                    finish = AppEvent.StartCommand
                else:
                    yield from self.svc.provision.exec_parallel(rec.cluster.vms, RESTART_SCRIPT)
                    finish = AppEvent.RecoveryDone
            yield self.svc.ckpt.restore_time(ckpt)
            coord = workerrt.restart(rec.cluster.size, blobs, self._alive(rec.cluster),
                                     *self._incarnation(app_id))
            self._apply(rec, finish)
            rec.finished = False
            rec.output = None
            self._run(rec, coord)
            self._timed(app_id, "restart", start)
            self.svc.trace(app_id, "restart", "resumed",
                           f"gen={ckpt.generation} kind={plan.kind.value if plan else 'user'}")
        except CacsError as exc:
            self._fail(rec, exc)

    def _replace_vms(self, rec: ApplicationRecord, dead: list[int]):
        """Passive recovery: swap the unreachable VMs for fresh ones."""
        old = rec.cluster
        self._apply(rec, AppEvent.RecoveryBegun)
        rec.cluster = None
        failed = [old.vms[i] for i in dead]
        self._release(rec.app_id, failed)
        self.svc.provision.forget(failed)
        fresh = yield from self._claim(rec, [vm.template for vm in failed])
        vms = list(old.vms)
        for i, vm in zip(dead, fresh.vms):
            vms[i] = vm
        rec.cluster = VirtualCluster(vms, old.created_at)
        self._apply(rec, AppEvent.VmsAllocated)
        yield from self._provision(rec, fresh.vms)
        self._apply(rec, AppEvent.ProvisionDone)

    def _release(self, app_id: int, vms: Sequence[VmDescriptor]) -> None:
        self.svc.cloud.release(vms)
        held = self.held.get(app_id, [])
        gone = {id(vm) for vm in vms}
        self.held[app_id] = [vm for vm in held if id(vm) not in gone]
        self.svc.trace(app_id, "cloud", "release", " ".join(vm.vm_id for vm in vms))

    def set_health(self, app_id: int, vm_index: int, healthy: bool) -> None:
        coord = self.coordinators.get(app_id)
        if coord is None:
            raise UnknownApp(f"app {app_id} has no running coordinator")
        coord.set_health(vm_index, healthy)

    # -- cloning / migration -------------------------------------------------------

    def clone(self, app_id: int, target, checkpoint_id: Optional[int] = None,
              backend_id: Optional[str] = None) -> int:
        from .client import InProcessClient, clone_via_api
        return clone_via_api(InProcessClient(self.svc), app_id, target,
                             checkpoint_id=checkpoint_id, backend_id=backend_id)

    def migrate(self, app_id: int, target, checkpoint_id: Optional[int] = None,
                backend_id: Optional[str] = None) -> int:
        """Clone to ``target`` and then terminate the source (not atomic)."""
        new_id = self.clone(app_id, target, checkpoint_id, backend_id)
        self.terminate(app_id)
        return new_id

    # -- termination ---------------------------------------------------------------

    def terminate(self, app_id: int) -> None:
        rec = self._record(app_id)
        if rec.state is AppState.TERMINATING:
            return
        self._apply(rec, AppEvent.DeleteRequest)
        self._stop_workload(app_id)
        self.svc.monitor.unwatch(app_id)
        self.svc.pool.cancel(app_id)
        self.svc.pool.submit(app_id, lambda: self._terminate(app_id), name=f"terminate:{app_id}")

    def _terminate(self, app_id: int):
        rec = self.svc.db.get(app_id)
        self.svc.db.delete(app_id)
        self.svc.trace(app_id, "terminate", "db-entry-deleted", "")
        delay = 1.0
        while True:
            try:
                n = self.svc.ckpt.delete_all(app_id)
                break
            except RemoteUnavailable:
                self.svc.trace(app_id, "terminate", "retry-delete", f"in {delay}s")
                yield delay
                delay = min(delay * 2, 60.0)
        self.svc.trace(app_id, "terminate", "images-deleted", f"count={n}")
        vms = self.held.pop(app_id, [])
        if rec is not None and rec.cluster is not None:
            vms = vms + [vm for vm in rec.cluster.vms if vm not in vms]
        released = self.svc.cloud.release(vms)
        self.svc.provision.forget(vms)
        self.svc.trace(app_id, "terminate", "vms-released", f"count={released}")
