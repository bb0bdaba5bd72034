import json

import pytest

from cacs.ckptstore import MANIFEST, CheckpointManager, LocalDirStore, MemoryStore
from cacs.clock import VirtualClock
from cacs.errors import (ImageUnavailable, NoCheckpoint, RemoteUnavailable, StorageFull,
                         UnknownCheckpoint)


def manager(**kw):
    clock = VirtualClock()
    local = kw.pop("local", MemoryStore())
    remote = kw.pop("remote", MemoryStore())
    return clock, CheckpointManager(clock, local, remote, **kw)


def test_generations_are_monotonic_per_app():
    clock, cm = manager()
    assert [cm.store_local(1, [b"a"]).generation for _ in range(3)] == [1, 2, 3]
    assert cm.store_local(2, [b"b"]).generation == 1
    assert [c.generation for c in cm.list(1)] == [1, 2, 3]


def test_keys_layout():
    clock, cm = manager(namespace="east")
    cm.store_local(7, [b"x", b"yy"])
    assert cm.local.list() == ["east/7/1/0", "east/7/1/1", f"east/7/1/{MANIFEST}"]
    manifest = json.loads(cm.local.get(f"east/7/1/{MANIFEST}"))
    assert manifest["size_bytes"] == 3 and manifest["replicated"] is False


def test_local_quota_rolls_back_partial_set():
    clock, cm = manager(local=MemoryStore(quota=400))
    cm.store_local(1, [b"a" * 40])
    with pytest.raises(StorageFull):
        cm.store_local(1, [b"b" * 100, b"c" * 100])
    assert [c.generation for c in cm.list(1)] == [1]
    assert cm.local.used_bytes() == 40 + len(cm.local.get(f"1/1/{MANIFEST}"))


def test_replication_takes_transfer_time():
    clock, cm = manager(remote=MemoryStore(bandwidth=1e6))
    ckpt = cm.store_local(1, [b"\0" * 1_000_000] * 3)
    clock.advance(2.999)
    assert cm.remote.list() == []
    clock.advance(3.0)
    assert cm.remote.peek("1/1/2") is not None
    assert cm.list(1)[0].replicated
    assert cm.schedule_replication(ckpt) is not None
    clock.advance(10)
    assert cm.replication_log == [(3.0, 1, 1, "ok")]


def test_replication_is_idempotent():
    clock, cm = manager()
    ckpt = cm.store_local(1, [b"abc"])
    first = cm.schedule_replication(ckpt)
    assert cm.schedule_replication(ckpt) is first
    clock.advance(1)
    written = cm.remote.bytes_written
    cm.schedule_replication(ckpt)
    clock.advance(2)
    assert cm.remote.bytes_written == written


def test_remote_outage_is_retried_with_backoff():
    clock, cm = manager(retry_base=1.0, retry_cap=4.0)
    cm.remote.available = False
    cm.store_local(1, [b"abc"])
    clock.advance(10.5)
    retries = [t for t, _, _, what in cm.replication_log if what == "retry"]
    assert retries == [0.0, 1.0, 3.0, 7.0]
    # listing still works from the local copy
    assert [c.generation for c in cm.list(1)] == [1]
    cm.remote.available = True
    clock.advance(20)
    assert cm.replication_log[-1] == (11.0, 1, 1, "ok")
    assert cm.remote.peek("1/1/0") == b"abc"


def test_restore_falls_back_to_remote():
    clock, cm = manager()
    ckpt = cm.store_local(1, [b"p0", b"p1"])
    clock.advance(1)
    for key in cm.local.list():
        cm.local.delete(key)
    assert cm.restore(cm.select_image(1)) == [b"p0", b"p1"]
    cm.remote.delete("1/1/1")
    with pytest.raises(ImageUnavailable):
        cm.restore(ckpt)


def test_restore_rejects_truncated_image():
    clock, cm = manager()
    ckpt = cm.store_local(1, [b"abcdef"])
    cm.local.put("1/1/0", b"abc")
    with pytest.raises(ImageUnavailable):
        cm.restore(ckpt)


def test_select_latest_or_specific():
    clock, cm = manager()
    with pytest.raises(NoCheckpoint):
        cm.select_image(1)
    for blob in (b"g1", b"g2", b"g3"):
        cm.store_local(1, [blob])
    assert cm.select_image(1).generation == 3
    assert cm.restore(cm.select_image(1, 2)) == [b"g2"]
    with pytest.raises(UnknownCheckpoint):
        cm.select_image(1, 9)


def test_uploads_commit_when_complete():
    clock, cm = manager()
    assert cm.upload(4, 1, 3, b"b", "u") == (1, False)
    assert cm.pending_upload(4, 1)
    assert cm.list(4) == []
    assert cm.upload(4, 0, 3, b"a", "u") == (1, False)
    assert cm.upload(4, 2, 3, b"c", "u") == (1, True)
    assert not cm.pending_upload(4, 1)
    ckpt = cm.select_image(4)
    assert cm.restore(ckpt) == [b"a", b"b", b"c"] and ckpt.source == "upload:u"
    with pytest.raises(ValueError):
        cm.upload(4, 3, 3, b"x")


def test_generation_reserved_by_upload_is_not_reused():
    clock, cm = manager()
    gen, _ = cm.upload(1, 0, 2, b"a", "slow")
    assert cm.store_local(1, [b"z"]).generation == gen + 1


def test_delete_and_delete_all():
    clock, cm = manager()
    for _ in range(3):
        cm.store_local(1, [b"x", b"y"])
    cm.store_local(2, [b"other"])
    clock.advance(1)
    cm.delete(1, 2)
    assert [c.generation for c in cm.list(1)] == [1, 3]
    with pytest.raises(UnknownCheckpoint):
        cm.delete(1, 2)
    assert cm.delete_all(1) == 2 * 2 * 3
    assert cm.blob_count(1) == 0 and not cm.has_app(1)
    assert cm.blob_count(2) == 4
    assert cm.delete_all(1) == 0


def test_delete_all_cancels_inflight_replication():
    clock, cm = manager(remote=MemoryStore(bandwidth=10.0))
    cm.store_local(1, [b"0123456789"])
    clock.advance(0.5)
    cm.delete_all(1)
    clock.advance(5)
    assert cm.remote.list() == [] and cm.local.list() == []


def test_delete_during_outage_raises_and_can_be_retried():
    clock, cm = manager()
    cm.store_local(1, [b"x"])
    clock.advance(1)
    cm.remote.available = False
    with pytest.raises(RemoteUnavailable):
        cm.delete_all(1)
    cm.remote.available = True
    cm.delete_all(1)
    assert cm.blob_count(1) == 0


def test_list_is_sorted_and_lazily_discovered():
    clock = VirtualClock()
    local, remote = MemoryStore(), MemoryStore()
    writer = CheckpointManager(clock, local, remote)
    for _ in range(4):
        writer.store_local(3, [b"x"])
    clock.advance(1)
    # a second manager over the same stores learns about the sets on first use
    reader = CheckpointManager(clock, MemoryStore(), remote)
    assert reader.index == {}
    assert [c.generation for c in reader.list(3)] == [1, 2, 3, 4]
    assert all(c.replicated for c in reader.list(3))
    assert 3 in reader.index


def test_namespaces_partition_a_shared_remote():
    clock = VirtualClock()
    remote = MemoryStore()
    a = CheckpointManager(clock, MemoryStore(), remote, namespace="a")
    b = CheckpointManager(clock, MemoryStore(), remote, namespace="b")
    a.store_local(1, [b"from-a"])
    clock.advance(1)
    assert b.list(1) == []
    b.store_local(1, [b"from-b"])
    clock.advance(2)
    a.delete_all(1)
    assert b.restore(b.select_image(1)) == [b"from-b"]


def test_keep_generations_prunes_older_sets():
    clock, cm = manager(keep_generations=2)
    for _ in range(5):
        cm.store_local(1, [b"x"])
        clock.advance(clock.now + 1)
    assert [c.generation for c in cm.list(1)] == [4, 5]
    assert cm.remote.list("1/1/") == []
    with pytest.raises(ValueError):
        manager(keep_generations=0)


def test_local_dir_store(tmp_path):
    store = LocalDirStore(tmp_path / "ckpt", quota=10)
    store.put("a/1/0", b"12345")
    assert store.get("a/1/0") == b"12345"
    assert store.list("a/") == ["a/1/0"]
    with pytest.raises(StorageFull):
        store.put("a/1/1", b"123456")
    store.put("a/1/0", b"1234567890")
    store.delete("a/1/0")
    assert store.list() == [] and not (tmp_path / "ckpt" / "a").exists()
    with pytest.raises(ValueError):
        store.put("../escape", b"x")
    with pytest.raises(KeyError):
        store.get("missing")


def test_manager_over_local_dirs(tmp_path):
    clock = VirtualClock()
    cm = CheckpointManager(clock, LocalDirStore(tmp_path / "l"), LocalDirStore(tmp_path / "r"))
    cm.store_local(1, [b"a", b"b"])
    clock.advance(1)
    assert (tmp_path / "r" / "1" / "1" / "1").read_bytes() == b"b"
    reopened = CheckpointManager(clock, LocalDirStore(tmp_path / "l"), LocalDirStore(tmp_path / "r"))
    assert reopened.restore(reopened.select_image(1)) == [b"a", b"b"]
    assert reopened.store_local(1, [b"c"]).generation == 2
