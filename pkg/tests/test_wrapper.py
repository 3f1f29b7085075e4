from __future__ import annotations

import time

import pytest
from hypothesis import given, settings, strategies as st

from opcbridge.client import connect_loopback
from opcbridge.clock import RealClock, SimClock
from opcbridge.model import GOOD, ItemValue, LengthMismatch, Quality, ScalarValue, Status, ValueType
from opcbridge.server import Constant, ItemSpec, OpcServer
from opcbridge.wrapper import (
    BACKOFF_CAP_MS, CommandQueue, Decision, InvalidPeriod, OpcWrapper, ProductionMode,
    WrapperConfig, WrapperState, decide,
)
from conftest import server_config, steps_item
from harness import Flaky, steps_run
from oracles import poll_schedule, simulate_polling

PPM, CBPM = ProductionMode.PERIODIC, ProductionMode.CHANGE_BASED


def reading(*payloads, q=GOOD, ts=0):
    return [ItemValue(ScalarValue.int32(v), q, ts) for v in payloads]


class TestDecide:
    def test_periodic_emits_identical_reading(self):
        state = WrapperState(last_emitted=tuple(reading(5)))
        assert decide(state, PPM, reading(5)) is Decision.EMIT

    def test_change_based_ignores_timestamp(self):
        state = WrapperState(last_emitted=tuple(reading(5, ts=100)))
        assert decide(state, CBPM, reading(5, ts=900)) is Decision.SUPPRESS
        assert decide(state, CBPM, reading(6, ts=100)) is Decision.EMIT

    def test_change_based_first_reading(self):
        assert decide(WrapperState(), CBPM, reading(5)) is Decision.EMIT

    def test_bad_quality(self):
        bad = reading(5, q=Quality(Status.BAD, 2))
        assert decide(WrapperState(), PPM, bad) is Decision.BAD_QUALITY
        assert decide(WrapperState(), CBPM, bad) is Decision.BAD_QUALITY

    def test_quality_flip_emits(self):
        state = WrapperState(last_emitted=tuple(reading(5)))
        assert decide(state, CBPM, reading(5, q=Quality(Status.UNCERTAIN, 1))) is Decision.EMIT

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            decide(WrapperState(), PPM, reading(1, 2), item_count=1)

    def test_pure(self):
        state = WrapperState()
        decide(state, CBPM, reading(1))
        assert state == WrapperState()


def test_config_validation():
    with pytest.raises(InvalidPeriod):
        WrapperConfig("w", ("x",), 0)
    with pytest.raises(ValueError):
        WrapperConfig("w", (), 10)


class TestSchedule:
    def test_periodic_one_second(self):
        run = steps_run(range(100), 100, 100, "PPM")
        run.clock.run_until(999)
        assert [t for t, _ in run.emissions] == list(range(0, 1000, 100))

    def test_change_based_one_second(self):
        run = steps_run(range(100), 100, 40, "CBPM")
        run.clock.run_until(999)
        assert [v for _, v in run.emissions] == list(range(10))

    def test_loss_above_sampling_period(self):
        run = steps_run(range(200), 100, 300, "CBPM")
        run.clock.run_until(10_000)
        assert len(run.emitted) < len(run.cache_writes)

    @settings(max_examples=60, deadline=None)
    @given(sampling=st.integers(1, 150), period=st.integers(1, 150),
           horizon=st.integers(0, 2000), mode=st.sampled_from(["PPM", "CBPM"]),
           values=st.lists(st.integers(0, 3), min_size=1, max_size=60))
    def test_matches_oracle(self, sampling, period, horizon, mode, values):
        run = steps_run(values, sampling, period, mode)
        run.clock.run_until(horizon)
        oracle = simulate_polling(lambda k: values[min(k, len(values) - 1)], sampling, horizon,
                                  poll_schedule(horizon, period), mode)
        assert run.emissions == oracle.emissions
        m = run.wrapper.metrics()
        assert m.ticks == len(oracle.polls)
        assert m.emissions + m.suppressed + m.bad_quality_ticks == m.ticks

    @settings(max_examples=30, deadline=None)
    @given(period=st.integers(1, 300), horizon=st.integers(0, 5000))
    def test_periodic_count_formula(self, period, horizon):
        run = steps_run([0], 100, period, "PPM")
        run.clock.run_until(horizon)
        assert len(run.emitted) == horizon // period + 1

    def test_change_based_never_repeats(self):
        values = [1, 1, 2, 2, 2, 3, 1, 1, 4] * 20
        run = steps_run(values, 30, 20, "CBPM")
        run.clock.run_until(6000)
        vals = [v for _, v in run.emissions]
        assert all(a != b for a, b in zip(vals, vals[1:]))


class TestControl:
    def test_set_period_reanchors(self):
        run = steps_run(range(100), 100, 100)
        run.clock.call_at(1000, lambda: run.wrapper.set_update_period(50), priority=-10)
        run.clock.run_until(1300)
        ticks = [t for t, _ in run.emissions]
        assert ticks == poll_schedule(1300, 100, changes=[(1000, 50)])
        assert ticks[10:] == [1000, 1050, 1100, 1150, 1200, 1250, 1300]

    def test_set_period_between_ticks(self):
        run = steps_run(range(100), 100, 100)
        run.clock.call_at(1020, lambda: run.wrapper.set_update_period(30))
        run.clock.run_until(1250)
        ticks = [t for t, _ in run.emissions]
        assert ticks[-7:] == [1000, 1100, 1130, 1160, 1190, 1220, 1250]
        assert ticks == poll_schedule(1250, 100, changes=[(1020, 30)])
        assert all(t >= 1020 for t in ticks if t > 1000)

    def test_set_period_to_current_value(self):
        run = steps_run(range(100), 100, 100)
        run.clock.call_at(1030, lambda: run.wrapper.set_update_period(100))
        run.clock.run_until(1500)
        assert [t for t, _ in run.emissions] == list(range(0, 1501, 100))

    @pytest.mark.parametrize("bad", [0, -5, 1.5, True])
    def test_invalid_period(self, bad):
        with pytest.raises(InvalidPeriod):
            CommandQueue().set_update_period(bad)

    def test_periodic_to_change_based_with_constant_input(self):
        run = steps_run([7], 100, 50, "PPM")
        run.clock.call_at(500, lambda: run.wrapper.set_mode(CBPM), priority=-10)
        run.clock.run_until(2000)
        assert [t for t, _ in run.emissions] == list(range(0, 500, 50))

    def test_change_based_to_periodic_resumes(self):
        run = steps_run([7], 100, 50, "CBPM")
        run.clock.call_at(500, lambda: run.wrapper.set_mode(PPM), priority=-10)
        run.clock.run_until(700)
        assert [t for t, _ in run.emissions] == [0, 500, 550, 600, 650, 700]

    def test_toggle_twice_coalesces(self):
        run = steps_run([7], 100, 50, "PPM")

        def toggle():
            run.wrapper.set_mode(CBPM)
            run.wrapper.set_mode(PPM)
        run.clock.call_at(520, toggle)
        run.clock.run_until(700)
        assert [t for t, _ in run.emissions] == list(range(0, 701, 50))
        assert run.wrapper.metrics().active_mode is PPM

    def test_requested_settings_visible_before_applied(self):
        run = steps_run([7], 100, 100)
        run.clock.run_until(150)
        run.wrapper.set_update_period(20)
        m = run.wrapper.metrics()
        assert (m.update_period_ms, m.active_update_period_ms) == (20, 100)
        run.clock.run_until(200)
        assert run.wrapper.metrics().active_update_period_ms == 20

    def test_stop(self):
        run = steps_run(range(100), 100, 100)
        run.clock.call_at(450, run.wrapper.stop)
        run.clock.run_until(2000)
        assert len(run.emitted) == 5 and run.wrapper.stopped
        assert run.wrapper.session is None


class TestMetrics:
    def test_mean_absent_before_two_emissions(self):
        run = steps_run([1], 100, 100)
        assert run.wrapper.metrics().mean_production_period_ms is None
        run.clock.run_until(0)
        assert run.wrapper.metrics().mean_production_period_ms is None

    def test_periodic_mean(self):
        run = steps_run([1], 100, 100)
        run.clock.run_until(1000)
        m = run.wrapper.metrics()
        assert m.emissions == 11 and m.mean_production_period_ms == 100.0

    def test_change_based_mean_matches_log(self):
        values = [0, 0, 1, 1, 1, 1, 2, 3, 3, 3, 3, 3, 3, 4]
        run = steps_run(values, 100, 40, "CBPM")
        run.clock.run_until(2000)
        times = [t for t, _ in run.emissions]
        gaps = [b - a for a, b in zip(times, times[1:])]
        assert run.wrapper.metrics().mean_production_period_ms == pytest.approx(sum(gaps) / len(gaps))

    def test_conservation_at_every_snapshot(self):
        values = [1.0, float("nan"), 2.0, 2.0, float("nan"), 3.0] * 10
        run = steps_run(values, 70, 30, "CBPM", vtype=ValueType.FLOAT64)
        for t in range(0, 4000, 17):
            run.clock.run_until(t)
            m = run.wrapper.metrics()
            assert m.emissions + m.suppressed + m.bad_quality_ticks == m.ticks
        assert m.bad_quality_ticks > 0

    def test_bad_quality_suppresses_emission(self):
        run = steps_run([float("nan")], 100, 50, "PPM", vtype=ValueType.FLOAT64)
        run.clock.run_until(500)
        m = run.wrapper.metrics()
        assert run.emitted == [] and m.bad_quality_ticks == m.ticks == 11

    def test_source_timestamps(self):
        clock = SimClock()
        server = OpcServer(server_config(steps_item("a.b", period=100)), clock)
        out = []
        w = OpcWrapper(WrapperConfig("w", ("a.b",), 40, include_source_timestamps=True),
                       out.append, clock, lambda cfg: connect_loopback(server))
        w.start(0)
        clock.run_until(250)
        assert out[-1].schema.names == ("a_b", "a_b_ts")
        assert out[-1]["a_b_ts"] == ScalarValue.int64(200) and out[-1].timestamp == 240


class TestReconnect:
    def test_backoff_and_recovery(self):
        clock = SimClock()
        server = OpcServer(server_config(steps_item("x")), clock)
        conn = Flaky(server)
        ticks = []
        w = OpcWrapper(WrapperConfig("w", ("x",), 100), lambda e: ticks.append(e.timestamp),
                       clock, conn)
        w.start(0)
        clock.run_until(250)
        conn.down = True
        wakeups = []
        original = w.step
        w.step = lambda now: (wakeups.append(now), original(now))[1]
        w.activity.cancel()
        w.activity = clock.spawn(w.step, 300)
        clock.run_until(300 + 200 + 1000 + 2000 + 4000 + 8000 + 8000)
        # three failed ticks, then 1 s, 2 s, 4 s, 8 s, 8 s of backoff
        assert wakeups == [300, 400, 500, 1500, 3500, 7500, 15500, 23500]
        m = w.metrics()
        assert m.transport_errors == 3 and m.reconnects == 0 and m.missed_ticks > 0
        conn.down = False
        clock.run_until(23500 + BACKOFF_CAP_MS + 250)
        assert w.metrics().reconnects == 1
        assert ticks[-3:] == [31500, 31600, 31700]

    def test_two_failures_then_recovery_keeps_schedule(self):
        clock = SimClock()
        server = OpcServer(server_config(steps_item("x")), clock)
        conn = Flaky(server)
        out = []
        w = OpcWrapper(WrapperConfig("w", ("x",), 100), out.append, clock, conn)
        w.start(0)
        clock.call_at(150, lambda: setattr(conn, "down", True))
        clock.call_at(350, lambda: setattr(conn, "down", False))
        clock.run_until(600)
        assert [e.timestamp for e in out] == [0, 100, 400, 500, 600]
        m = w.metrics()
        assert (m.transport_errors, m.missed_ticks, m.reconnects) == (2, 2, 0)


def test_several_wrappers_share_one_server():
    clock = SimClock()
    server = OpcServer(server_config(steps_item("x"), steps_item("y", period=50)), clock)
    outs = {"p": [], "c": []}
    for name, mode, period in (("p", PPM, 20), ("c", CBPM, 20)):
        OpcWrapper(WrapperConfig(name, ("x", "y"), period, mode), outs[name].append, clock,
                   lambda cfg: connect_loopback(server)).start(0)
    clock.run_until(1000)
    assert len(outs["p"]) == 51 and len(outs["c"]) == 21
    assert server.stats.sessions == 2


def test_overrun_on_real_clock():
    clock = RealClock()
    server = OpcServer(server_config(ItemSpec("c", ValueType.INT32, Constant(1), 5)), clock)
    w = OpcWrapper(WrapperConfig("w", ("c",), 5), lambda e: time.sleep(0.012), clock,
                   lambda cfg: connect_loopback(server))
    w.start()
    time.sleep(0.3)
    w.stop()
    deadline = time.monotonic() + 2
    while not w.stopped and time.monotonic() < deadline:
        time.sleep(0.01)
    m = w.metrics()
    assert w.stopped and m.overruns > 0
    assert m.ticks < 0.3 / 0.005
