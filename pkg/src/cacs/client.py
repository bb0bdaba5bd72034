"""API clients: in-process and HTTP, plus the clone-over-the-API routine."""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from typing import Any, Optional, Union

from .errors import CacsError, NoCheckpoint, NotFound, UnknownCheckpoint, UploadFailed
from .gateway import ApiRequest

logger = logging.getLogger(__name__)


class ApiError(CacsError):
    def __init__(self, status: int, body: Any):
        self.status = status
        self.body = body
        msg = body.get("message", body) if isinstance(body, dict) else body
        super().__init__(f"HTTP {status}: {msg}")

    @property
    def error(self) -> str:
        return self.body.get("error", "") if isinstance(self.body, dict) else ""


class _Client:
    def request(self, method: str, path: str, body: Any = None) -> tuple[int, Any]:
        raise NotImplementedError

    def call(self, method: str, path: str, body: Any = None) -> Any:
        status, doc = self.request(method, path, body)
        if status >= 400:
            raise ApiError(status, doc)
        return doc

    def get(self, path: str) -> Any:
        return self.call("GET", path)

    def post(self, path: str, body: Any = None) -> Any:
        return self.call("POST", path, body)

    def delete(self, path: str) -> Any:
        return self.call("DELETE", path)


class InProcessClient(_Client):
    def __init__(self, service):
        self.service = service

    def request(self, method, path, body=None):
        # JSON round trip so in-process calls see exactly what HTTP callers see
        if body is not None:
            body = json.loads(json.dumps(body))
        resp = self.service.handle(ApiRequest(method, path, body))
        return resp.status, json.loads(json.dumps(resp.body))

    def __repr__(self) -> str:
        return f"InProcessClient({self.service.name})"


class HttpClient(_Client):
    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def request(self, method, path, body=None):
        data = json.dumps(body).encode() if body is not None else None
        req = urllib.request.Request(self.base_url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
                status = resp.status
        except urllib.error.HTTPError as exc:
            raw, status = exc.read(), exc.code
        return status, (json.loads(raw) if raw else {})

    def __repr__(self) -> str:
        return f"HttpClient({self.base_url})"


Target = Union[_Client, str, Any]


def as_client(target: Target) -> _Client:
    """Accept a client, a base URL, or a Service instance."""
    if isinstance(target, _Client):
        return target
    if isinstance(target, str):
        return HttpClient(target)
    if hasattr(target, "handle"):
        return InProcessClient(target)
    raise TypeError(f"cannot talk to {target!r}")


def clone_via_api(source: Target, app_id: int, target: Target, *,
                  checkpoint_id: Optional[int] = None, backend_id: Optional[str] = None) -> int:
    """Copy an application to ``target`` using only public API calls.

    Creates an idle coordinator on the target, uploads one image per process
    and restarts it from the uploaded set. The source is never modified; a
    half-built target application is deleted again on failure.
    """
    src, dst = as_client(source), as_client(target)
    try:
        sets = src.get(f"/coordinators/{app_id}/checkpoints")["checkpoints"]
    except ApiError as exc:
        if exc.status == 404:
            raise NotFound(f"source has no coordinator {app_id}") from None
        raise
    if not sets:
        raise NoCheckpoint(f"app {app_id} has no checkpoint to clone")
    gen = checkpoint_id if checkpoint_id is not None else max(s["id"] for s in sets)
    if gen not in {s["id"] for s in sets}:
        raise UnknownCheckpoint(f"app {app_id} has no checkpoint {gen}")
    app = src.get(f"/coordinators/{app_id}")
    images = src.get(f"/coordinators/{app_id}/checkpoints/{gen}?images=1")["blobs"]

    asr = dict(app["asr"])
    asr["backend_id"] = backend_id
    asr["start"] = False
    try:
        new_id = dst.post("/coordinators", asr)["id"]
    except (ApiError, OSError) as exc:
        raise UploadFailed(f"target refused the application: {exc}") from exc
    try:
        upload_id = f"clone-{app_id}-{gen}"
        target_gen = None
        for i, blob in enumerate(images):
            doc = dst.post(f"/coordinators/{new_id}/checkpoints",
                           {"image": blob, "vm_index": i, "count": len(images), "upload_id": upload_id})
            target_gen = doc["checkpoint_id"]
            if doc["complete"] != (i == len(images) - 1):
                raise UploadFailed(f"upload {i} of {len(images)} reported complete={doc['complete']}")
        dst.post(f"/coordinators/{new_id}/checkpoints/{target_gen}")
    except (ApiError, OSError, UploadFailed) as exc:
        try:
            dst.delete(f"/coordinators/{new_id}")
        except (ApiError, OSError):
            logger.warning("could not clean up half-cloned app %s", new_id)
        if isinstance(exc, UploadFailed):
            raise
        raise UploadFailed(f"clone of {app_id} failed: {exc}") from exc
    return new_id
