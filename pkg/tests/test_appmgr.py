import re

import pytest

from cacs.cloudsim import BackendProfile
from cacs.errors import NoCheckpoint, UnknownCheckpoint
from cacs.lifecycle import AppEvent
from cacs.service import Service, ServiceConfig
from cacs.workerrt import WorkloadKind, WorkloadSpec, deserialize, reference_output

from conftest import make_service, ring_asr, run_to_finish, run_to_state


def expected(n=4, iterations=10, seed=3):
    kind = WorkloadKind.RingSum if n >= 2 else WorkloadKind.SingleCounter
    return reference_output(WorkloadSpec(kind, iterations=iterations, seed=seed), n)


def submit(svc, **kw):
    resp = svc.request("POST", "/coordinators", ring_asr(**kw))
    assert resp.status == 202, resp.body
    return resp.body["id"]


def checkpoint(svc, app_id):
    resp = svc.request("POST", f"/coordinators/{app_id}/checkpoints")
    assert resp.status == 202, resp.body
    svc.drain()
    return resp.body["checkpoint_id"]


def test_submit_walks_the_lifecycle(svc):
    app = submit(svc)
    run_to_state(svc, app, "RUNNING")
    events = [e for _, e, _ in svc.db.get(app).history]
    assert events == [AppEvent.VmsAllocated, AppEvent.ProvisionDone, AppEvent.StartCommand]
    # 20 s boot, then one SSH wave of 2.5 s
    assert svc.clock.now == 22.5
    vm = svc.db.get(app).cluster.vms[0]
    assert vm.fs["action_log"][:2] == ["mkdir-checkpoint-dir", "install-monitor-daemon"]
    assert run_to_finish(svc, app) == expected()


def test_unavailable_cluster_leads_to_error_then_cleanup():
    svc = make_service(profiles={"tiny": BackendProfile("tiny", capacity=2)},
                       default_backend="tiny", error_linger=30.0)
    app = submit(svc)
    svc.advance(1)
    rec = svc.db.get(app)
    assert rec.state.value == "ERROR" and rec.error.startswith("ClusterUnavailable")
    svc.advance(30)
    svc.drain()
    assert svc.db.get(app) is None and svc.audit()["live"] == 0


def test_restart_from_latest_and_earlier(svc):
    app = submit(svc, iterations=20)
    run_to_state(svc, app, "RUNNING")
    svc.advance(4)
    first = checkpoint(svc, app)
    svc.advance(6)
    second = checkpoint(svc, app)
    progress = {}
    for gen in (first, second):
        blobs = svc.ckpt.restore(svc.ckpt.select_image(app, gen))
        progress[gen] = min(deserialize(b).iteration for b in blobs)
    assert progress[first] < progress[second]

    coord_before = svc.db.get(app).coordinator_id
    assert svc.request("POST", f"/coordinators/{app}/checkpoints/{first}").status == 202
    svc.drain()
    coord = svc.appmgr.coordinators[app]
    assert coord.coordinator_id != coord_before and coord.progress == progress[first]
    assert svc.db.get(app).history[-1][1] is AppEvent.RecoveryDone
    assert run_to_finish(svc, app) == expected(iterations=20)


def test_restart_without_checkpoint(svc):
    app = submit(svc)
    run_to_state(svc, app, "RUNNING")
    with pytest.raises(NoCheckpoint):
        svc.appmgr.restart(app)
    with pytest.raises(NoCheckpoint):
        svc.appmgr.restart(app, 4)
    checkpoint(svc, app)
    with pytest.raises(UnknownCheckpoint):
        svc.appmgr.restart(app, 4)


def test_clone_within_one_service(svc):
    app = submit(svc)
    run_to_state(svc, app, "RUNNING")
    svc.advance(3)
    checkpoint(svc, app)
    new = svc.appmgr.clone(app, svc)
    assert new != app
    run_to_state(svc, new, "RUNNING")
    assert run_to_finish(svc, new) == expected()
    assert run_to_finish(svc, app) == expected()
    assert svc.ckpt.restore(svc.ckpt.select_image(new)) == svc.ckpt.restore(svc.ckpt.select_image(app, 1))


def shared_pair():
    a = make_service(name="east")
    b = Service(ServiceConfig(default_backend="openstack-sim"), clock=a.clock, name="west",
                remote=a.ckpt.remote, meter=a.meter)
    return a, b


def test_clone_across_services_and_backends():
    a, b = shared_pair()
    app = submit(a, iterations=12)
    run_to_state(a, app, "RUNNING")
    a.advance(5)
    checkpoint(a, app)
    new = a.appmgr.clone(app, b)
    assert b.db.get(new).asr.backend_id == "openstack-sim"
    run_to_state(b, new, "RUNNING")
    assert b.db.get(new).cluster.backend_id == "openstack-sim"
    assert run_to_finish(b, new) == expected(iterations=12)
    assert a.state(app) == "RUNNING"


def test_clone_to_explicit_backend():
    a, b = shared_pair()
    app = submit(a)
    run_to_state(a, app, "RUNNING")
    checkpoint(a, app)
    new = a.appmgr.clone(app, b, backend_id="snooze-sim")
    run_to_state(b, new, "RUNNING")
    assert b.db.get(new).cluster.backend_id == "snooze-sim"


def test_clone_without_checkpoint_fails_cleanly():
    a, b = shared_pair()
    app = submit(a)
    run_to_state(a, app, "RUNNING")
    with pytest.raises(NoCheckpoint):
        a.appmgr.clone(app, b)
    assert b.live_apps() == 0


def test_migrate_terminates_source():
    a, b = shared_pair()
    app = submit(a)
    run_to_state(a, app, "RUNNING")
    a.advance(2)
    checkpoint(a, app)
    new = a.appmgr.migrate(app, b)
    a.drain()
    assert a.db.get(app) is None and a.ckpt.blob_count(app) == 0
    assert a.audit()["live"] == 0
    assert run_to_finish(b, new) == expected()


def test_terminate_runs_three_steps_and_second_delete_is_404(svc):
    app = submit(svc)
    run_to_state(svc, app, "RUNNING")
    checkpoint(svc, app)
    svc.advance(2)
    assert svc.request("DELETE", f"/coordinators/{app}").status == 202
    svc.drain()
    steps = [line.split()[-1] if "=" not in line.split()[-1] else line.split()[-2]
             for line in svc.events(app, "terminate")]
    assert steps == ["db-entry-deleted", "images-deleted", "vms-released"]
    assert svc.request("DELETE", f"/coordinators/{app}").status == 404
    assert svc.ckpt.blob_count(app) == 0 and svc.audit() == {**svc.audit(), "held": 0, "live": 0}


def test_terminate_while_booting_releases_vms(svc):
    app = submit(svc)
    svc.advance(5)
    assert svc.audit()["live"] == 4
    svc.request("DELETE", f"/coordinators/{app}")
    svc.drain()
    assert svc.audit()["live"] == 0 and svc.audit()["held"] == 0


def test_terminate_from_error(svc):
    app = submit(svc)
    run_to_state(svc, app, "RUNNING")
    svc.appmgr._fail(svc.db.get(app), RuntimeError("disk on fire"))
    assert svc.state(app) == "ERROR"
    assert svc.request("DELETE", f"/coordinators/{app}").status == 202
    svc.drain()
    assert svc.db.get(app) is None and svc.audit()["live"] == 0


def test_vm_failure_recovery_replaces_only_failed_vm(svc):
    app = submit(svc, iterations=10**6)
    run_to_state(svc, app, "RUNNING")
    checkpoint(svc, app)
    vms = list(svc.db.get(app).cluster.vms)
    svc.cloud.inject_failure(vms[2].vm_id)
    svc.advance(0)
    run_to_state(svc, app, "CREATING")
    run_to_state(svc, app, "RUNNING")
    svc.drain()
    now = svc.db.get(app).cluster.vms
    assert [a is b for a, b in zip(vms, now)] == [True, True, False, True]
    assert "monitor_daemon" in now[2].fs
    kinds = [plan.kind.value for _, _, plan in svc.appmgr.recoveries]
    assert kinds == ["VmFailure"]
    assert svc.audit()["held"] == svc.audit()["live"] == 4


def test_app_failure_recovery_keeps_vms(svc):
    app = submit(svc, iterations=10**6)
    run_to_state(svc, app, "RUNNING")
    checkpoint(svc, app)
    vms = list(svc.db.get(app).cluster.vms)
    svc.appmgr.set_health(app, 1, False)
    svc.advance(20)
    svc.drain()
    assert [plan.kind.value for _, _, plan in svc.appmgr.recoveries] == ["AppFailure"]
    assert svc.db.get(app).cluster.vms == vms
    assert svc.state(app) == "RUNNING"
    assert svc.appmgr.coordinators[app].daemons[1].healthy


def test_failure_without_checkpoint_is_fatal(svc):
    app = submit(svc, iterations=10**6)
    run_to_state(svc, app, "RUNNING")
    svc.appmgr.set_health(app, 0, False)
    svc.advance(20)
    assert svc.state(app) == "ERROR" and "NoCheckpoint" in svc.db.get(app).error


def test_coordinator_ids_differ_per_incarnation(svc):
    app = submit(svc, iterations=100)
    run_to_state(svc, app, "RUNNING")
    checkpoint(svc, app)
    for _ in range(2):
        svc.request("POST", f"/coordinators/{app}/checkpoints/1")
        svc.drain()
    history = svc.appmgr.coordinator_history[app]
    assert len(history) == len(set(history)) == 3


def _scripted_trace(n):
    svc = make_service(seed=1)
    app = submit(svc, n=n, iterations=40, policy={"mode": "periodic", "period": 5})
    run_to_state(svc, app, "RUNNING")
    svc.advance(12)
    svc.cloud.inject_failure(svc.db.get(app).cluster.vms[-1].vm_id)
    run_to_finish(svc, app)
    svc.request("DELETE", f"/coordinators/{app}")
    svc.drain()
    return "\n".join(svc.trace_log).encode()


@pytest.mark.parametrize("n", [2, 4, 8])
def test_identical_scripts_give_identical_traces(n):
    first = _scripted_trace(n)
    assert first == _scripted_trace(n)
    assert b"VmFailure" in first and b"vms-released" in first


def test_periodic_policy_checkpoints_on_schedule(svc):
    app = submit(svc, iterations=10**6, policy={"mode": "periodic", "period": 10})
    run_to_state(svc, app, "RUNNING")
    start = svc.clock.now
    svc.advance(35)
    svc.drain()
    stored = [line for line in svc.events(app, "ckpt") if " stored " in line]
    assert len(stored) == 3
    assert all("reason=periodic" in line for line in stored)
    assert float(stored[0].split()[0]) > start + 10


def test_app_initiated_policy(svc):
    app = submit(svc, iterations=3, policy={"mode": "app"})
    run_to_finish(svc, app)
    reasons = re.findall(r"reason=(\w+)", "\n".join(svc.events(app, "ckpt")))
    assert reasons and set(reasons) == {"app"}
