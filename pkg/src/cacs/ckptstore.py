"""Checkpoint Manager: local-first image storage with lazy remote replication.

Each checkpoint set is stored as one JSON manifest plus one binary blob per
process, under keys ``<app>/<generation>/manifest.json`` and
``<app>/<generation>/<vm_index>``. Sets written by the application itself
(periodic or app-initiated checkpoints) are not announced to the manager;
the index is rebuilt from the stores when images are listed or selected.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

from .clock import VirtualClock
from .errors import (ImageUnavailable, NoCheckpoint, RemoteUnavailable, StorageFull,
                     UnknownCheckpoint)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"


@dataclass(frozen=True)
class ImageRef:
    vm_index: int
    key: str
    size_bytes: int


@dataclass(frozen=True)
class CheckpointSet:
    app_id: int
    generation: int
    created_at: float
    images: tuple[ImageRef, ...]
    replicated: bool = False
    source: Optional[str] = None

    @property
    def size_bytes(self) -> int:
        return sum(i.size_bytes for i in self.images)

    def to_dict(self) -> dict:
        return {
            "id": self.generation,
            "app_id": self.app_id,
            "created_at": self.created_at,
            "size_bytes": self.size_bytes,
            "replicated": self.replicated,
            "images": [{"vm_index": i.vm_index, "key": i.key, "size_bytes": i.size_bytes}
                       for i in self.images],
            "source": self.source,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CheckpointSet":
        return cls(
            app_id=doc["app_id"], generation=doc["id"], created_at=doc["created_at"],
            images=tuple(ImageRef(i["vm_index"], i["key"], i["size_bytes"]) for i in doc["images"]),
            replicated=doc.get("replicated", False), source=doc.get("source"),
        )


class ObjectStore(ABC):
    """Minimal put/get/delete/list contract keyed by slash-separated strings."""

    def __init__(self, bandwidth: float = float("inf"), quota: Optional[int] = None):
        self.bandwidth = bandwidth
        self.quota = quota
        self.available = True
        self.bytes_written = 0
        self.bytes_read = 0

    def _check(self) -> None:
        if not self.available:
            raise RemoteUnavailable(f"{type(self).__name__} is unavailable")

    def transfer_time(self, nbytes: int) -> float:
        return 0.0 if self.bandwidth == float("inf") else nbytes / self.bandwidth

    def put(self, key: str, data: bytes) -> None:
        self._check()
        if self.quota is not None:
            current = self.used_bytes() - len(self.peek(key) or b"")
            if current + len(data) > self.quota:
                raise StorageFull(f"quota {self.quota} exceeded by {key}")
        self._put(key, data)
        self.bytes_written += len(data)

    def get(self, key: str) -> bytes:
        self._check()
        data = self.peek(key)
        if data is None:
            raise KeyError(key)
        self.bytes_read += len(data)
        return data

    def delete(self, key: str) -> None:
        self._check()
        self._delete(key)

    def list(self, prefix: str = "") -> list[str]:
        self._check()
        return sorted(k for k in self._keys() if k.startswith(prefix))

    @abstractmethod
    def peek(self, key: str) -> Optional[bytes]: ...

    @abstractmethod
    def _put(self, key: str, data: bytes) -> None: ...

    @abstractmethod
    def _delete(self, key: str) -> None: ...

    @abstractmethod
    def _keys(self) -> list[str]: ...

    def used_bytes(self) -> int:
        return sum(len(self.peek(k) or b"") for k in self._keys())


class MemoryStore(ObjectStore):
    """In-process object store (the remote stand-in)."""

    def __init__(self, bandwidth: float = float("inf"), quota: Optional[int] = None):
        super().__init__(bandwidth, quota)
        self._data: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def peek(self, key):
        return self._data.get(key)

    def _put(self, key, data):
        with self._lock:
            self._data[key] = bytes(data)

    def _delete(self, key):
        with self._lock:
            self._data.pop(key, None)

    def _keys(self):
        return list(self._data)

    def used_bytes(self) -> int:
        return sum(len(v) for v in self._data.values())


class LocalDirStore(ObjectStore):
    """Directory tree under ``root``; keys map to relative paths."""

    def __init__(self, root: str | os.PathLike, bandwidth: float = float("inf"),
                 quota: Optional[int] = None):
        super().__init__(bandwidth, quota)
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        path = (self.root / key).resolve()
        if self.root.resolve() not in path.parents:
            raise ValueError(f"key escapes store root: {key!r}")
        return path

    def peek(self, key):
        path = self._path(key)
        return path.read_bytes() if path.is_file() else None

    def _put(self, key, data):
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def _delete(self, key):
        path = self._path(key)
        if path.is_file():
            path.unlink()
        parent = path.parent
        while parent != self.root and parent.is_dir() and not any(parent.iterdir()):
            parent.rmdir()
            parent = parent.parent

    def _keys(self):
        return [p.relative_to(self.root).as_posix() for p in self.root.rglob("*")
                if p.is_file() and not p.name.endswith(".tmp")]


class CheckpointManager:
    def __init__(self, clock: VirtualClock, local: Optional[ObjectStore] = None,
                 remote: Optional[ObjectStore] = None, retry_base: float = 1.0,
                 retry_cap: float = 60.0, namespace: str = "",
                 keep_generations: Optional[int] = None):
        if keep_generations is not None and keep_generations < 1:
            raise ValueError("keep_generations must be >= 1")
        self.clock = clock
        # None keeps every generation; otherwise older sets are pruned on write
        self.keep_generations = keep_generations
        # Services sharing one remote store keep disjoint key spaces.
        self.namespace = f"{namespace}/" if namespace else ""
        self.local = local if local is not None else MemoryStore()
        self.remote = remote if remote is not None else MemoryStore()
        self.retry_base = retry_base
        self.retry_cap = retry_cap
        # app_id -> generation -> metadata, filled lazily from the stores
        self.index: dict[int, dict[int, CheckpointSet]] = {}
        self._last_generation: dict[int, int] = {}
        self._pending_uploads: dict[tuple[int, str], dict] = {}
        self._deleted: set[int] = set()
        self._replications: dict[tuple[int, int], object] = {}
        self.replication_log: list[tuple[float, int, int, str]] = []

    def _app_prefix(self, app_id: int) -> str:
        return f"{self.namespace}{app_id}/"

    def _prefix(self, app_id: int, generation: int) -> str:
        return f"{self._app_prefix(app_id)}{generation}/"

    # -- writing ---------------------------------------------------------------

    def reserve_generation(self, app_id: int) -> int:
        known = max(self._scan(app_id), default=0)
        gen = max(known, self._last_generation.get(app_id, 0)) + 1
        self._last_generation[app_id] = gen
        return gen

    def store_local(self, app_id: int, images: Sequence[bytes], generation: Optional[int] = None,
                    source: Optional[str] = None, replicate: bool = True) -> CheckpointSet:
        """Write a set to the local store and schedule lazy replication.

        On :class:`StorageFull` every blob written so far is removed again.
        """
        self._deleted.discard(app_id)
        gen = generation if generation is not None else self.reserve_generation(app_id)
        refs = []
        prefix = self._prefix(app_id, gen)
        try:
            for i, blob in enumerate(images):
                key = f"{prefix}{i}"
                self.local.put(key, blob)
                refs.append(ImageRef(i, key, len(blob)))
            ckpt = CheckpointSet(app_id, gen, self.clock.now, tuple(refs), False, source)
            self.local.put(prefix + MANIFEST, json.dumps(ckpt.to_dict()).encode())
        except StorageFull:
            for ref in refs:
                self.local.delete(ref.key)
            raise
        if replicate:
            self.schedule_replication(ckpt)
        self._prune(app_id, gen)
        return ckpt

    def _prune(self, app_id: int, newest: int) -> None:
        if self.keep_generations is None:
            return
        old = sorted(g for g in self._scan(app_id) if g < newest)
        for gen in old[:max(0, len(old) - (self.keep_generations - 1))]:
            try:
                self._delete_prefix(self._prefix(app_id, gen))
            except RemoteUnavailable:
                return
            self.index.get(app_id, {}).pop(gen, None)

    def upload(self, app_id: int, vm_index: int, count: int, blob: bytes,
               upload_id: str = "default") -> tuple[int, bool]:
        """Accept one externally produced image; the set is committed once all
        ``count`` images arrived. Returns ``(generation, complete)``."""
        if not 0 <= vm_index < count:
            raise ValueError(f"vm_index {vm_index} outside 0..{count - 1}")
        key = (app_id, upload_id)
        pending = self._pending_uploads.get(key)
        if pending is None or pending["count"] != count:
            pending = {"count": count, "generation": self.reserve_generation(app_id), "blobs": {}}
            self._pending_uploads[key] = pending
        pending["blobs"][vm_index] = bytes(blob)
        gen = pending["generation"]
        if len(pending["blobs"]) < count:
            return gen, False
        del self._pending_uploads[key]
        blobs = [pending["blobs"][i] for i in range(count)]
        self.store_local(app_id, blobs, generation=gen, source=f"upload:{upload_id}")
        return gen, True

    def pending_upload(self, app_id: int, generation: int) -> bool:
        return any(a == app_id and p["generation"] == generation
                   for (a, _), p in self._pending_uploads.items())

    # -- replication -------------------------------------------------------------

    def schedule_replication(self, ckpt: CheckpointSet):
        key = (ckpt.app_id, ckpt.generation)
        if key in self._replications:
            return self._replications[key]
        proc = self.clock.spawn(self.replicate(ckpt), name=f"replicate:{ckpt.app_id}/{ckpt.generation}")
        self._replications[key] = proc
        return proc

    def replicate(self, ckpt: CheckpointSet):
        """Process: copy a set to the remote store; retries with backoff."""
        prefix = self._prefix(ckpt.app_id, ckpt.generation)
        delay = self.retry_base
        try:
            while True:
                if ckpt.app_id in self._deleted:
                    return False
                current = self._read_manifest(self.local, ckpt.app_id, ckpt.generation)
                if current is None:
                    return False
                if current.replicated:
                    return True
                try:
                    blobs = [(ref.key, self.local.get(ref.key)) for ref in current.images]
                    yield self.remote.transfer_time(sum(len(b) for _, b in blobs))
                    if (ckpt.app_id in self._deleted
                            or self._read_manifest(self.local, ckpt.app_id, ckpt.generation) is None):
                        return False
                    for key, blob in blobs:
                        self.remote.put(key, blob)
                    done = replace(current, replicated=True)
                    manifest = json.dumps(done.to_dict()).encode()
                    self.remote.put(prefix + MANIFEST, manifest)
                    if self.local.peek(prefix + MANIFEST) is not None:
                        self.local.put(prefix + MANIFEST, manifest)
                    if ckpt.app_id in self.index and ckpt.generation in self.index[ckpt.app_id]:
                        self.index[ckpt.app_id][ckpt.generation] = done
                    self.replication_log.append((self.clock.now, ckpt.app_id, ckpt.generation, "ok"))
                    return True
                except RemoteUnavailable:
                    self.replication_log.append((self.clock.now, ckpt.app_id, ckpt.generation, "retry"))
                    yield delay
                    delay = min(delay * 2, self.retry_cap)
        finally:
            self._replications.pop((ckpt.app_id, ckpt.generation), None)

    # -- discovery / selection -----------------------------------------------------

    def _read_manifest(self, store: ObjectStore, app_id: int, gen: int) -> Optional[CheckpointSet]:
        raw = store.peek(self._prefix(app_id, gen) + MANIFEST)
        return CheckpointSet.from_dict(json.loads(raw)) if raw is not None else None

    def _scan(self, app_id: int) -> set[int]:
        gens = set()
        for store in (self.local, self.remote):
            if not store.available:
                continue
            prefix = self._app_prefix(app_id)
            for key in store.list(prefix):
                parts = key[len(prefix):].split("/")
                if len(parts) == 2 and parts[1] == MANIFEST:
                    gens.add(int(parts[0]))
        return gens

    def discover(self, app_id: int) -> dict[int, CheckpointSet]:
        """Rebuild the index entry for ``app_id`` from the stores."""
        found = {}
        for gen in sorted(self._scan(app_id)):
            local = self._read_manifest(self.local, app_id, gen)
            remote = self._read_manifest(self.remote, app_id, gen) if self.remote.available else None
            ckpt = local or remote
            if local is not None and remote is not None:
                ckpt = replace(local, replicated=local.replicated or remote.replicated)
            found[gen] = ckpt
        if found:
            self.index[app_id] = found
        else:
            self.index.pop(app_id, None)
        return found

    def list(self, app_id: int) -> list[CheckpointSet]:
        sets = self.discover(app_id)
        return [sets[g] for g in sorted(sets)]

    def select_image(self, app_id: int, checkpoint_id: Optional[int] = None) -> CheckpointSet:
        sets = self.discover(app_id)
        if not sets:
            raise NoCheckpoint(f"app {app_id} has no checkpoint")
        if checkpoint_id is None:
            return sets[max(sets)]
        if checkpoint_id not in sets:
            raise UnknownCheckpoint(f"app {app_id} has no checkpoint {checkpoint_id}")
        return sets[checkpoint_id]

    def restore(self, ckpt: CheckpointSet) -> list[bytes]:
        """Fetch every image of a set, local copy first, remote as fallback."""
        blobs = []
        for ref in sorted(ckpt.images, key=lambda r: r.vm_index):
            data = self.local.peek(ref.key) if self.local.available else None
            if data is None and self.remote.available:
                data = self.remote.peek(ref.key)
            if data is None:
                raise ImageUnavailable(f"{ref.key} is in neither store")
            if len(data) != ref.size_bytes:
                raise ImageUnavailable(f"{ref.key}: size {len(data)} != {ref.size_bytes}")
            blobs.append(data)
        return blobs

    def restore_time(self, ckpt: CheckpointSet) -> float:
        """Virtual seconds for every VM to download its image in parallel."""
        biggest = max((r.size_bytes for r in ckpt.images), default=0)
        store = self.local if self.local.peek(ckpt.images[0].key) is not None else self.remote
        return store.transfer_time(biggest)

    # -- deletion ------------------------------------------------------------------

    def delete(self, app_id: int, generation: int) -> None:
        if generation not in self.discover(app_id):
            raise UnknownCheckpoint(f"app {app_id} has no checkpoint {generation}")
        self._delete_prefix(self._prefix(app_id, generation))
        self.index.get(app_id, {}).pop(generation, None)

    def delete_all(self, app_id: int) -> int:
        """Remove every blob and manifest of ``app_id`` from both stores."""
        self._deleted.add(app_id)
        for key in [k for k in self._pending_uploads if k[0] == app_id]:
            del self._pending_uploads[key]
        removed = self._delete_prefix(self._app_prefix(app_id))
        self.index.pop(app_id, None)
        self._last_generation.pop(app_id, None)
        return removed

    def _delete_prefix(self, prefix: str) -> int:
        removed = 0
        for store in (self.local, self.remote):
            if not store.available:
                # retried by the caller (termination steps are idempotent)
                raise RemoteUnavailable(f"cannot delete {prefix}: store unavailable")
            for key in store.list(prefix):
                store.delete(key)
                removed += 1
        return removed

    def blob_count(self, app_id: int) -> int:
        return sum(1 for store in (self.local, self.remote) for k in store._keys()
                   if k.startswith(self._app_prefix(app_id)))

    def has_app(self, app_id: int) -> bool:
        return bool(self._scan(app_id))
