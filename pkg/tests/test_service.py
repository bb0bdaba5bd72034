import pytest

from cacs.service import Service, ServiceConfig, load_config

from conftest import ring_asr, run_to_state


def test_load_config(tmp_path):
    path = tmp_path / "cacs.ini"
    path.write_text(
        "[service]\n"
        "default_backend = openstack-sim\nseed = 9\npool_capacity = 4\nerror_linger_s = 5\n"
        "local_quota_bytes = 1000000\nkeep_generations = 2\n"
        "ssh_max_concurrent = 8\nssh_setup_s = 0\nssh_reuse = no\nssh_global_limit = yes\n"
        "heartbeat_period_s = 2.5\nprobe_timeout_s = 0.25\n\n"
        "[backend.openstack-sim]\ncapacity = 12\n"
    )
    cfg = load_config(str(path))
    assert (cfg.default_backend, cfg.seed, cfg.pool_capacity) == ("openstack-sim", 9, 4)
    assert (cfg.error_linger, cfg.local_quota, cfg.keep_generations) == (5.0, 1_000_000, 2)
    assert (cfg.ssh.max_concurrent, cfg.ssh.connection_setup, cfg.ssh.reuse) == (8, 0.0, False)
    assert cfg.ssh.per_command_latency == 2.0 and cfg.ssh_global_limit
    assert (cfg.monitor.period, cfg.monitor.probe_timeout) == (2.5, 0.25)
    assert cfg.profiles["openstack-sim"].capacity == 12
    assert "snooze-sim" in cfg.profiles


def test_unknown_config_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[service]\nturbo = 1\n")
    with pytest.raises(ValueError):
        load_config(str(path))


def test_local_dir_backed_service(tmp_path):
    svc = Service(ServiceConfig(local_root=str(tmp_path / "ckpt")))
    svc.request("POST", "/coordinators", ring_asr(n=2))
    run_to_state(svc, 1, "RUNNING")
    svc.request("POST", "/coordinators/1/checkpoints")
    svc.drain()
    assert (tmp_path / "ckpt" / "cacs" / "1" / "1" / "manifest.json").is_file()


def test_trace_filtering():
    svc = Service()
    svc.request("POST", "/coordinators", ring_asr(n=2))
    svc.request("POST", "/coordinators", ring_asr(n=2))
    svc.drain()
    assert all(" app=2 " in line for line in svc.events(2))
    assert svc.events(1, "lifecycle") and all(" lifecycle " in line for line in svc.events(1, "lifecycle"))
    assert svc.audit()["held"] == svc.audit()["live"] == 4
