import json

import pytest

from cacs.errors import ScenarioFailed
from cacs.experiments import MetricReport, run_experiment
from cacs.monitor import roundtrip_law


def test_report_rejects_time_going_backwards():
    report = MetricReport("x", {}, 0)
    report.add(1.0, "a", 1)
    report.add(0.5, "b", 1)
    with pytest.raises(ValueError):
        report.add(0.9, "a", 2)
    assert report.series_names() == ["a", "b"]


def test_unknown_scenario():
    with pytest.raises(ScenarioFailed):
        run_experiment("warp-drive")


def test_heartbeat_small():
    report = run_experiment("heartbeat", {"ns": [1, 2, 4, 8, 16]})
    rts = report.summary["roundtrip_s"]
    assert rts == {str(n): roundtrip_law(n, 2 ** -7, 2 ** -10) for n in (1, 2, 4, 8, 16)}


def test_scaling_small_is_deterministic():
    params = {"ns": [1, 16, 17], "ssh": {"connection_setup": 0.0}}
    a = run_experiment("scaling", params, seed=4)
    b = run_experiment("scaling", params, seed=4)
    assert a.rows == b.rows and a.summary == b.summary
    phases = a.summary["phases"]
    assert [phases[str(n)]["provision_s"] for n in (1, 16, 17)] == [2.0, 2.0, 4.0]


def test_compare_backends_small():
    report = run_experiment("compare", {"ns": [2, 4], "state_bytes": 1 << 16})
    assert set(report.summary) == {"snooze-sim", "openstack-sim"}
    assert all(s.split("/")[0] in report.summary for s in report.series_names())
    slow = report.summary["openstack-sim"]["4"]["allocate_s"]
    assert slow > report.summary["snooze-sim"]["4"]["allocate_s"]


def test_burst_small():
    report = run_experiment("burst100", {"apps": 20})
    s = report.summary
    assert s["exact_matches"] == s["samples"] and s["r_squared"] >= 0.99
    assert s["slope_Bps_per_s"] < 0


def test_migrate_small(tmp_path):
    report = run_experiment("migrate40", {"apps": 4, "state_bytes": 100_000, "hold": 5})
    assert report.summary["live_before_termination"] == 8
    assert report.summary["live_source_after"] == 0
    assert report.summary["live_target_after_migration"] == 4
    paths = report.write(tmp_path / "m4", plot=False)
    assert set(paths) == {"csv", "json"}
    doc = json.loads(paths["json"].read_text())
    assert doc["scenario"] == "migrate40" and doc["params"]["apps"] == 4
