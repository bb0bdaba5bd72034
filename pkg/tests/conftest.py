import sys
import time
from contextlib import contextmanager

import pytest

from cacs.service import Service, ServiceConfig

_ACCEPTANCE: list[tuple[int, str, bool, float, str]] = []


def ring_asr(n=4, iterations=10, seed=3, policy=None, backend=None, **spec):
    doc = {
        "vm_templates": [{"count": n}],
        "app_spec": {"kind": "ring_sum" if n >= 2 else "single_counter",
                     "iterations": iterations, "seed": seed, "state_bytes_total": 4096, **spec},
        "checkpoint_policy": policy or {"mode": "user"},
    }
    if backend:
        doc["backend_id"] = backend
    return doc


def make_service(**cfg):
    name = cfg.pop("name", "cacs")
    return Service(ServiceConfig(**cfg), name=name)


def run_to_state(svc, app_id, state, limit=10_000.0):
    assert svc.run_until(lambda: svc.state(app_id) == state, svc.clock.now + limit), \
        f"app {app_id} stuck in {svc.state(app_id)}"


def run_to_finish(svc, app_id, limit=100_000.0):
    assert svc.run_until(lambda: svc.db.get(app_id).finished and svc.idle(),
                         svc.clock.now + limit), f"app {app_id} did not finish"
    return svc.db.get(app_id).output


@pytest.fixture
def svc():
    return make_service()


@contextmanager
def _criterion(number: int, title: str, budget_s: float, reporter=None):
    start = time.perf_counter()
    ok, detail = False, ""
    try:
        yield
        ok = True
    except BaseException as exc:
        detail = f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        elapsed = time.perf_counter() - start
        if ok and elapsed > budget_s:
            ok, detail = False, f"runtime {elapsed:.2f}s over budget {budget_s}s"
        _ACCEPTANCE.append((number, title, ok, elapsed, detail))
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'} ({elapsed:.2f}s) {title}"
        line += f" - {detail}" if detail else ""
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        else:
            sys.__stdout__.write(f"\n{line}\n")
            sys.__stdout__.flush()
    assert elapsed <= budget_s, f"criterion {number} took {elapsed:.2f}s (budget {budget_s}s)"


@pytest.fixture
def criterion(request):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")
    return lambda number, title, budget_s: _criterion(number, title, budget_s, reporter)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, elapsed, detail in sorted(_ACCEPTANCE):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {elapsed:6.2f}s  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
