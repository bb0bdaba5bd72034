import pytest

from cacs.clock import LATE, VirtualClock


def test_advance_empty_queue_updates_now():
    clock = VirtualClock()
    assert clock.advance(12.5) == []
    assert clock.now == 12.5


def test_equal_timestamps_fire_in_insertion_order():
    clock, order = VirtualClock(), []
    for tag in "abc":
        clock.schedule(5.0, order.append, tag)
    clock.advance(5.0)
    assert order == ["a", "b", "c"]


def test_late_priority_runs_after_normal_events_at_same_instant():
    clock, order = VirtualClock(), []
    clock.schedule(1.0, order.append, "late", priority=LATE)
    clock.schedule(1.0, order.append, "normal")
    clock.advance(1.0)
    assert order == ["normal", "late"]


def test_causality():
    clock, fired = VirtualClock(), []
    clock.schedule(30.0, fired.append, "boot")
    clock.advance(25.0)
    assert fired == [] and clock.now == 25.0
    clock.advance(30.0)
    assert fired == ["boot"]


def test_time_never_decreases():
    clock = VirtualClock()
    clock.advance(10)
    with pytest.raises(ValueError):
        clock.advance(5)
    with pytest.raises(ValueError):
        clock.schedule_at(3, lambda: None)


def test_cancelled_events_do_not_fire():
    clock, fired = VirtualClock(), []
    ev = clock.schedule(1.0, fired.append, 1)
    ev.cancel()
    clock.advance(2.0)
    assert fired == [] and clock.pending == 0


def test_process_waits_on_delays_and_signals():
    clock = VirtualClock()
    sig = clock.signal("go")
    trace = []

    def worker():
        yield 2.0
        trace.append(("slept", clock.now))
        value = yield sig
        trace.append(("signalled", clock.now, value))
        return "done"

    proc = clock.spawn(worker())
    clock.schedule(5.0, sig.fire, 42)
    clock.advance(10.0)
    assert trace == [("slept", 2.0), ("signalled", 5.0, 42)]
    assert proc.result() == "done"


def test_process_error_propagates_to_waiter():
    clock = VirtualClock()

    def failing():
        yield 1.0
        raise KeyError("boom")

    def parent():
        try:
            yield clock.spawn(failing())
        except KeyError:
            return "caught"

    assert clock.run_process(parent()) == "caught"


def test_kill_stops_a_process():
    clock, trace = VirtualClock(), []

    def worker():
        yield 5.0
        trace.append("ran")

    proc = clock.spawn(worker())
    clock.advance(1.0)
    proc.kill()
    clock.advance(10.0)
    assert trace == [] and proc.done


def test_run_until_respects_limit():
    clock = VirtualClock()
    clock.schedule(100.0, lambda: None)
    assert clock.run_until(lambda: False, limit=50.0) is False
    assert clock.now == 0.0


def test_timestamps_are_quantized_so_durations_are_exact():
    from cacs.clock import RESOLUTION, VirtualClock
    clock = VirtualClock()
    clock.advance(0.1 + 0.2)
    starts, ends = [], []
    for _ in range(50):
        starts.append(clock.now)
        clock.schedule(2.5, lambda: ends.append(clock.now))
        clock.advance(clock.now + 2.5)
        clock.advance(clock.now + 1 / 3)
    assert [e - s for s, e in zip(starts, ends)] == [2.5] * 50
    assert all((t * RESOLUTION).is_integer() for t in ends)
