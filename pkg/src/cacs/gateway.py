"""REST resource layer and the in-memory coordinators database.

Routes::

    GET    /coordinators                        list applications
    POST   /coordinators                        submit an ASR
    GET    /coordinators/:id                    one application
    DELETE /coordinators/:id                    terminate it
    GET    /coordinators/:id/checkpoints        list checkpoint sets
    POST   /coordinators/:id/checkpoints        trigger (no body) or upload (body)
    GET    /coordinators/:id/checkpoints/:id    one checkpoint set
    POST   /coordinators/:id/checkpoints/:id    restart from it
    DELETE /coordinators/:id/checkpoints/:id    delete it

Reads answer 200 synchronously. Mutations are validated synchronously and
answered 202; the work itself runs on the service's worker pool.
"""

from __future__ import annotations

import base64
import binascii
import itertools
import logging
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Optional
from urllib.parse import parse_qs, urlsplit

from .errors import CacsError, Conflict, InvalidAsr, UnknownApp, UnknownCheckpoint, UnknownRoute
from .lifecycle import ApplicationRecord, AppState, AppSubmissionRequest, validate_asr
from .monitor import check_hook_name

if TYPE_CHECKING:
    from .service import Service

logger = logging.getLogger(__name__)

METHODS = ("GET", "POST", "DELETE")
STATUSES = (200, 202, 204, 400, 404, 409, 500)

_ROUTES = {
    ("coordinators",): {"GET": "list", "POST": "create"},
    ("coordinators", None): {"GET": "show", "DELETE": "delete"},
    ("coordinators", None, "checkpoints"): {"GET": "list", "POST": "trigger-or-upload"},
    ("coordinators", None, "checkpoints", None): {"GET": "show", "POST": "restart",
                                                 "DELETE": "delete"},
}
_RESOURCE = {1: "coordinators", 2: "coordinator", 3: "checkpoints", 4: "checkpoint"}


@dataclass
class ApiRequest:
    method: str
    path: str
    body: Optional[Any] = None

    def __post_init__(self):
        self.method = self.method.upper()


@dataclass
class ApiResponse:
    status: int
    body: Any = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"status {self.status} outside the API contract")


def route(method: str, path: str) -> tuple[str, str, dict[str, int]]:
    """Map a request line onto ``(resource, action, ids)`` or raise UnknownRoute."""
    parts = [p for p in urlsplit(path).path.split("/") if p]
    if not 1 <= len(parts) <= 4 or parts[0] != "coordinators":
        raise UnknownRoute(f"no route for {path}")
    if len(parts) >= 3 and parts[2] != "checkpoints":
        raise UnknownRoute(f"no route for {path}")
    ids = {}
    for pos, name in ((1, "coord"), (3, "ckpt")):
        if len(parts) > pos:
            if not parts[pos].isdigit():
                raise UnknownRoute(f"bad id {parts[pos]!r} in {path}")
            ids[name] = int(parts[pos])
    shape = tuple(p if i in (0, 2) else None for i, p in enumerate(parts))
    action = _ROUTES[shape].get(method.upper())
    if action is None:
        raise UnknownRoute(f"{method} not supported on {path}")
    return _RESOURCE[len(parts)], action, ids


class CoordinatorsDb:
    """In-memory records plus the checkpoint index, behind one lock.

    Writers for one application are additionally serialized by a per-app
    lock; readers only take the table lock for the length of a lookup.
    """

    def __init__(self, checkpoint_index: Optional[dict] = None):
        self.records: dict[int, ApplicationRecord] = {}
        self.checkpoint_index = checkpoint_index if checkpoint_index is not None else {}
        self._lock = threading.RLock()
        self._app_locks: dict[int, threading.RLock] = {}
        self._ids = itertools.count(1)

    def create(self, asr: AppSubmissionRequest, now: float) -> ApplicationRecord:
        with self._lock:
            app_id = next(self._ids)
            rec = ApplicationRecord(app_id=app_id, asr=asr, created_at=now)
            self.records[app_id] = rec
            self._app_locks[app_id] = threading.RLock()
            return rec

    def get(self, app_id: int) -> Optional[ApplicationRecord]:
        with self._lock:
            return self.records.get(app_id)

    def app_lock(self, app_id: int) -> threading.RLock:
        with self._lock:
            return self._app_locks.setdefault(app_id, threading.RLock())

    def delete(self, app_id: int) -> bool:
        with self._lock:
            found = self.records.pop(app_id, None) is not None
            self.checkpoint_index.pop(app_id, None)
            self._app_locks.pop(app_id, None)
            return found

    def ids(self) -> list[int]:
        with self._lock:
            return sorted(self.records)

    def list(self) -> list[ApplicationRecord]:
        with self._lock:
            return [self.records[i] for i in sorted(self.records)]

    def __len__(self) -> int:
        return len(self.records)


def _decode_image(body: dict) -> tuple[int, int, bytes, str]:
    try:
        blob = base64.b64decode(body["image"], validate=True)
        vm_index = int(body.get("vm_index", 0))
        count = int(body.get("count", 1))
    except (KeyError, TypeError, ValueError, binascii.Error) as exc:
        raise InvalidAsr(f"bad upload body: {exc}") from None
    if count < 1 or not 0 <= vm_index < count:
        raise InvalidAsr(f"vm_index {vm_index} / count {count} out of range")
    return vm_index, count, blob, str(body.get("upload_id", "default"))


class Gateway:
    def __init__(self, service: "Service"):
        self.svc = service

    def handle(self, request: ApiRequest) -> ApiResponse:
        try:
            resource, action, ids = route(request.method, request.path)
            query = parse_qs(urlsplit(request.path).query)
            with self.svc.lock:
                return self._dispatch(resource, action, ids, request.body, query)
        except CacsError as exc:
            status = exc.status if exc.status in STATUSES else 500
            return ApiResponse(status, {"error": type(exc).__name__, "message": str(exc)})
        except Exception as exc:  # noqa: BLE001 - surfaced as a 500
            logger.exception("unhandled error for %s %s", request.method, request.path)
            return ApiResponse(500, {"error": type(exc).__name__, "message": str(exc)})

    def _app(self, app_id: int) -> ApplicationRecord:
        rec = self.svc.db.get(app_id)
        if rec is None:
            raise UnknownApp(f"no coordinator {app_id}")
        return rec

    def _dispatch(self, resource, action, ids, body, query) -> ApiResponse:
        svc = self.svc
        if resource == "coordinators":
            if action == "list":
                return ApiResponse(200, {"coordinators": [r.to_dict() for r in svc.db.list()]})
            if not isinstance(body, dict):
                raise InvalidAsr("POST /coordinators needs an ASR object")
            asr = validate_asr(body, svc.cloud.backends, svc.config.default_backend)
            try:
                check_hook_name(asr.health_hook)
            except ValueError as exc:
                raise InvalidAsr(str(exc)) from None
            app_id = svc.appmgr.submit(asr, start=bool(body.get("start", True)))
            rec = svc.db.get(app_id)
            return ApiResponse(202, {"id": app_id, "state": rec.state.value})

        rec = self._app(ids["coord"])
        app_id = rec.app_id
        with svc.db.app_lock(app_id):
            if resource == "coordinator":
                if action == "show":
                    return ApiResponse(200, rec.to_dict())
                svc.appmgr.terminate(app_id)
                return ApiResponse(202, {"id": app_id, "state": AppState.TERMINATING.value})

            if resource == "checkpoints":
                if action == "list":
                    sets = svc.ckpt.list(app_id)
                    return ApiResponse(200, {"id": app_id, "checkpoints": [
                        {"id": s.generation, "created_at": s.created_at, "size_bytes": s.size_bytes,
                         "replicated": s.replicated, "images": len(s.images)} for s in sets]})
                if rec.state is AppState.TERMINATING:
                    raise Conflict(f"coordinator {app_id} is terminating")
                if body:
                    if not isinstance(body, dict):
                        raise InvalidAsr("upload body must be an object")
                    vm_index, count, blob, upload_id = _decode_image(body)
                    gen, complete = svc.ckpt.upload(app_id, vm_index, count, blob, upload_id)
                    svc.trace(app_id, "ckpt", "upload", f"gen={gen} vm_index={vm_index} complete={complete}")
                    return ApiResponse(202, {"id": app_id, "checkpoint_id": gen, "complete": complete})
                coord = svc.appmgr.coordinators.get(app_id)
                if rec.state is not AppState.RUNNING or coord is None or coord.finished:
                    raise Conflict(f"coordinator {app_id} is {rec.state.value}; cannot checkpoint")
                gen = svc.ckpt.reserve_generation(app_id)
                svc.appmgr.request_checkpoint(app_id, "user", gen)
                return ApiResponse(202, {"id": app_id, "checkpoint_id": gen})

            # single checkpoint resource
            gen = ids["ckpt"]
            if action == "show":
                sets = svc.ckpt.discover(app_id)
                if gen not in sets:
                    raise UnknownCheckpoint(f"coordinator {app_id} has no checkpoint {gen}")
                doc = sets[gen].to_dict()
                if query.get("images", ["0"])[0] in ("1", "true", "yes"):
                    doc["blobs"] = [base64.b64encode(b).decode() for b in svc.ckpt.restore(sets[gen])]
                return ApiResponse(200, doc)
            if action == "delete":
                if gen not in svc.ckpt.discover(app_id):
                    raise UnknownCheckpoint(f"coordinator {app_id} has no checkpoint {gen}")
                svc.pool.submit(app_id, lambda: self._delete_checkpoint(app_id, gen),
                                name=f"delete-checkpoint:{app_id}")
                return ApiResponse(202, {"id": app_id, "checkpoint_id": gen})
            # restart
            if svc.ckpt.pending_upload(app_id, gen):
                raise Conflict(f"checkpoint {gen} of {app_id} is still being uploaded")
            if gen not in svc.ckpt.discover(app_id):
                raise UnknownCheckpoint(f"coordinator {app_id} has no checkpoint {gen}")
            svc.appmgr.restart(app_id, gen)
            return ApiResponse(202, {"id": app_id, "checkpoint_id": gen, "state": rec.state.value})

    def _delete_checkpoint(self, app_id: int, gen: int):
        yield None
        self.svc.ckpt.delete(app_id, gen)
        self.svc.trace(app_id, "ckpt", "deleted", f"gen={gen}")
