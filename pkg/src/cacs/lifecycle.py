"""Application lifecycle: domain records and the coordinator state machine.

The edge set is small enough to write out as a table; ``transition`` is a
total function over ``AppState x AppEvent`` that either returns the successor
or raises :class:`IllegalTransition`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional

from .cloudsim import VirtualCluster, VmTemplate
from .errors import IllegalTransition, InvalidAsr
from .workerrt import WorkloadSpec

DEFAULT_CHECKPOINT_PERIOD = 60.0


class AppState(str, enum.Enum):
    CREATING = "CREATING"
    PROVISION = "PROVISION"
    READY = "READY"
    RUNNING = "RUNNING"
    TERMINATING = "TERMINATING"
    ERROR = "ERROR"


class AppEvent(str, enum.Enum):
    VmsAllocated = "VmsAllocated"
    ProvisionDone = "ProvisionDone"
    StartCommand = "StartCommand"
    DeleteRequest = "DeleteRequest"
    FatalError = "FatalError"
    RecoveryBegun = "RecoveryBegun"
    RecoveryDone = "RecoveryDone"


_S, _E = AppState, AppEvent

EDGES: dict[tuple[AppState, AppEvent], AppState] = {
    (_S.CREATING, _E.VmsAllocated): _S.PROVISION,
    (_S.PROVISION, _E.ProvisionDone): _S.READY,
    (_S.READY, _E.StartCommand): _S.RUNNING,
    (_S.RUNNING, _E.RecoveryBegun): _S.CREATING,
    (_S.RUNNING, _E.RecoveryDone): _S.RUNNING,
}
for _state in AppState:
    EDGES[(_state, _E.DeleteRequest)] = _S.TERMINATING
    if _state is not _S.TERMINATING:
        EDGES[(_state, _E.FatalError)] = _S.ERROR
del _state

# ERROR is left automatically: the service itself issues the DeleteRequest.
AUTOMATIC_EVENT = {_S.ERROR: _E.DeleteRequest}


def transition(state: AppState, event: AppEvent) -> AppState:
    try:
        return EDGES[(AppState(state), AppEvent(event))]
    except KeyError:
        raise IllegalTransition(state, event) from None


class CheckpointMode(str, enum.Enum):
    UserInitiated = "user"
    Periodic = "periodic"
    AppInitiated = "app"


@dataclass(frozen=True)
class CheckpointPolicy:
    mode: CheckpointMode = CheckpointMode.Periodic
    period: Optional[float] = DEFAULT_CHECKPOINT_PERIOD

    def __post_init__(self):
        if (self.mode is CheckpointMode.Periodic) != (self.period is not None):
            raise InvalidAsr("period must be given exactly when mode is periodic")
        if self.period is not None and not self.period > 0:
            raise InvalidAsr(f"checkpoint period must be positive, got {self.period}")

    def to_dict(self) -> dict:
        return {"mode": self.mode.value, "period": self.period}


@dataclass(frozen=True)
class AppSubmissionRequest:
    vm_templates: tuple[VmTemplate, ...]
    checkpoint_policy: CheckpointPolicy
    app_spec: WorkloadSpec
    backend_id: Optional[str] = None
    health_hook: str = "process_alive"

    def to_dict(self) -> dict:
        return {
            "vm_templates": [t.to_dict() for t in self.vm_templates],
            "checkpoint_policy": self.checkpoint_policy.to_dict(),
            "app_spec": self.app_spec.to_dict(),
            "backend_id": self.backend_id,
            "health_hook": self.health_hook,
        }


def _parse_policy(doc: Optional[Mapping[str, Any]]) -> CheckpointPolicy:
    if doc is None:
        return CheckpointPolicy()
    mode_raw = doc.get("mode", "periodic")
    try:
        mode = CheckpointMode(mode_raw)
    except ValueError:
        try:
            mode = CheckpointMode[mode_raw]
        except KeyError:
            raise InvalidAsr(f"unknown checkpoint mode {mode_raw!r}") from None
    period = doc.get("period")
    if mode is CheckpointMode.Periodic and period is None:
        period = DEFAULT_CHECKPOINT_PERIOD
    if period is not None:
        try:
            period = float(period)
        except (TypeError, ValueError):
            raise InvalidAsr(f"checkpoint period is not a number: {period!r}") from None
    return CheckpointPolicy(mode, period)


def _parse_templates(docs) -> tuple[VmTemplate, ...]:
    if not isinstance(docs, list):
        raise InvalidAsr("vm_templates must be a list")
    templates = []
    for doc in docs:
        if not isinstance(doc, Mapping):
            raise InvalidAsr("each VM template must be an object")
        count = doc.get("count", 1)
        if not isinstance(count, int) or count < 0:
            raise InvalidAsr(f"template count must be a non-negative integer, got {count!r}")
        try:
            template = VmTemplate(
                vcpus=int(doc.get("vcpus", 1)),
                memory_mb=int(doc.get("memory_mb", 2048)),
                image_name=str(doc.get("image_name", "ubuntu-dmtcp")),
            )
        except ValueError as exc:
            raise InvalidAsr(str(exc)) from None
        templates.extend([template] * count)
    return tuple(templates)


def validate_asr(
    doc: Mapping[str, Any] | AppSubmissionRequest,
    backends: Iterable[str],
    default_backend: Optional[str] = None,
) -> AppSubmissionRequest:
    """Parse and normalize an ASR document.

    Fills the default policy (periodic, 60 virtual seconds) and the default
    backend, and checks that the referenced backend exists.
    """
    backends = set(backends)
    if isinstance(doc, AppSubmissionRequest):
        asr = doc
    else:
        if not isinstance(doc, Mapping):
            raise InvalidAsr("body must be a JSON object")
        templates = _parse_templates(doc.get("vm_templates", []))
        policy = _parse_policy(doc.get("checkpoint_policy"))
        try:
            spec = WorkloadSpec.from_dict(doc.get("app_spec") or {})
        except (TypeError, ValueError) as exc:
            raise InvalidAsr(f"bad app_spec: {exc}") from None
        asr = AppSubmissionRequest(
            vm_templates=templates,
            checkpoint_policy=policy,
            app_spec=spec,
            backend_id=doc.get("backend_id"),
            health_hook=str(doc.get("health_hook", "process_alive")),
        )
    if not asr.vm_templates:
        raise InvalidAsr("at least one VM template is required")
    if asr.backend_id is None:
        if default_backend is None:
            raise InvalidAsr("no backend_id given and no default backend configured")
        asr = replace(asr, backend_id=default_backend)
    if asr.backend_id not in backends:
        raise InvalidAsr(f"unknown backend {asr.backend_id!r}")
    return asr


@dataclass
class ApplicationRecord:
    app_id: int
    asr: AppSubmissionRequest
    created_at: float
    state: AppState = AppState.CREATING
    cluster: Optional[VirtualCluster] = None
    event_seq: int = 0
    coordinator_id: Optional[str] = None
    error: Optional[str] = None
    output: Optional[list[int]] = None
    finished: bool = False
    history: list[tuple[float, AppEvent, AppState]] = field(default_factory=list)

    def apply(self, event: AppEvent, now: float) -> AppState:
        # transition() raises before anything is touched
        new_state = transition(self.state, event)
        self.state = new_state
        self.event_seq += 1
        self.history.append((now, event, new_state))
        return new_state

    def to_dict(self) -> dict:
        return {
            "id": self.app_id,
            "state": self.state.value,
            "backend": self.asr.backend_id,
            "created_at": self.created_at,
            "event_seq": self.event_seq,
            "coordinator_id": self.coordinator_id,
            "vms": [vm.vm_id for vm in self.cluster.vms] if self.cluster else [],
            "finished": self.finished,
            "output": self.output,
            "error": self.error,
            "asr": self.asr.to_dict(),
        }
