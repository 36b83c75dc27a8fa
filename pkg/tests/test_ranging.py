import numpy as np
import pytest
from hypothesis import given, strategies as st

from proxsim import ranging
from proxsim.core import MS, SEC, SPEED_OF_LIGHT_AIR, US
from proxsim.ranging import (
    MalformedTimestamps,
    TwrTimestamps,
    allocate_slots,
    distance_to_tof_ticks,
    responder_slot_start,
    schedule_next_window,
    sstwr_distance,
    synthesize_timestamps,
    window_duration,
)

C = SPEED_OF_LIGHT_AIR


class TestScheduleNextWindow:
    def test_zero_jitter(self):
        rng = np.random.default_rng(1)
        assert schedule_next_window(1000, 2 * SEC, 0, rng) == 1000 + 2 * SEC

    def test_draws_bounded_and_centered(self):
        # 10,000 draws with J = 100 ms: all inside [U-J, U+J], empirical
        # mean within 2 ms of U.
        rng = np.random.default_rng(42)
        u, j = 2 * SEC, 100 * MS
        offsets = [schedule_next_window(0, u, j, rng) - u for _ in range(10_000)]
        assert min(offsets) >= -j and max(offsets) <= j
        assert abs(sum(offsets) / len(offsets)) < 2 * MS

    def test_different_seeds_rarely_coincide(self):
        # Two nodes with equal period but different seeds: window starts
        # differ in at least 99% of 1,000 consecutive periods.
        a, b = np.random.default_rng(7), np.random.default_rng(8)
        t_a = t_b = 0
        same = 0
        for _ in range(1000):
            t_a = schedule_next_window(t_a, 2 * SEC, 100 * MS, a)
            t_b = schedule_next_window(t_b, 2 * SEC, 100 * MS, b)
            same += t_a == t_b
        assert same <= 10


class TestSstwrDistance:
    def test_zero_time_of_flight(self):
        d, clamped = sstwr_distance(TwrTimestamps(0, 100, 400, 400), C)
        assert d == 0.0 and not clamped

    def test_one_meter_example(self):
        # Round-trip minus reply delay of 6.6713 ns corresponds to
        # 6.6713e-9 * c / 2 = 0.99974 m, approximately 1 m.
        expected = 6.6713e-9 * C / 2.0
        ts = TwrTimestamps(t1=0.0, t2=10_000.0, t3=10_300.0, t4=10_306.6713)
        d, _ = sstwr_distance(ts, C)
        assert d == pytest.approx(expected, rel=1e-12)
        assert abs(d - 1.0) < 1e-3

    def test_negative_tof_clamped_and_flagged(self):
        d, clamped = sstwr_distance(TwrTimestamps(0, 100, 500, 300), C)
        assert d == 0.0 and clamped

    def test_malformed_timestamps(self):
        with pytest.raises(MalformedTimestamps):
            sstwr_distance(TwrTimestamps(100, 0, 10, 100), C)
        with pytest.raises(MalformedTimestamps):
            sstwr_distance(TwrTimestamps(0, 100, 50, 200), C)

    @given(
        st.floats(0, 1e6), st.floats(0, 1e6),
        st.floats(0.1, 1e6), st.floats(0.1, 1e6),
    )
    def test_never_negative(self, t1, dt2, dt3, dt4):
        ts = TwrTimestamps(t1, t1 + dt2, t1 + dt2 + dt3, t1 + dt4)
        if ts.t4 <= ts.t1:
            return
        d, _ = sstwr_distance(ts, C)
        assert d >= 0.0


class TestDriftBias:
    # Closed-form oracle: measured minus true distance equals
    # c * T_reply * (drift_i - drift_r) / 2 to first order.
    @pytest.mark.parametrize("rel_ppm", [-50, -20, -5, 5, 20, 50])
    @pytest.mark.parametrize("reply_us", [100, 300, 1000])
    def test_bias_matches_formula(self, rel_ppm, reply_us):
        true_m = 2.0
        drift = rel_ppm * 1e-6
        ts = synthesize_timestamps(
            distance_to_tof_ticks(true_m),
            poll_tx=0,
            reply_delay=reply_us * US,
            drift_initiator=drift,
            drift_responder=0.0,
            sub_tick=True,
        )
        measured, _ = sstwr_distance(ts, C)
        predicted = C * (reply_us * 1e-6) * drift / 2.0
        assert measured - true_m == pytest.approx(predicted, rel=0.05)

    def test_responder_fast_20ppm_reply_300us(self):
        # Relative drift of 20 ppm at a 300 us reply delay biases the
        # estimate by about 0.9 m (c * 300e-6 * 20e-6 / 2).
        ts = synthesize_timestamps(
            distance_to_tof_ticks(5.0), 0, 300 * US, 20e-6, 0.0, sub_tick=True
        )
        measured, _ = sstwr_distance(ts, C)
        assert measured - 5.0 == pytest.approx(0.8991, abs=0.01)

    def test_integer_ticks_quantization_below_30cm(self):
        for true_m in (0.5, 1.0, 2.0, 17.3):
            ts = synthesize_timestamps(
                distance_to_tof_ticks(true_m), 12345, 300 * US, 0.0, 0.0
            )
            measured, _ = sstwr_distance(ts, C)
            assert abs(measured - true_m) < 0.3

    def test_sub_tick_exact(self):
        ts = synthesize_timestamps(
            distance_to_tof_ticks(3.0), 12345, 300 * US, 0.0, 0.0, sub_tick=True
        )
        measured, _ = sstwr_distance(ts, C)
        assert measured == pytest.approx(3.0, abs=1e-9)


class TestSlots:
    def test_allocate_union(self):
        bm = allocate_slots(0b1000100, [9], [])
        assert bm == 0b1001000100

    def test_allocate_departure(self):
        assert allocate_slots(0b1000100, [], [6]) == 0b100

    def test_allocate_idempotent(self):
        assert allocate_slots(0b100, [2], []) == 0b100

    def test_slot_start_first(self):
        assert responder_slot_start(1000, 1, 4 * MS) == 1000

    def test_slot_start_second(self):
        assert responder_slot_start(1000, 2, 4 * MS) == 1000 + 4 * MS

    def test_nine_slot_window(self):
        # Last of nine slots starts at +8R; the window ends at +9R.
        r = 4 * MS
        bm = sum(1 << x for x in range(9))
        assert responder_slot_start(0, 9, r) == 8 * r
        assert window_duration(bm, r) == 9 * r

    def test_ordinal_counts_from_one(self):
        with pytest.raises(ValueError):
            responder_slot_start(0, 0, 4 * MS)

    @given(st.integers(0, (1 << 104) - 1))
    def test_window_duration_linear(self, bm):
        assert window_duration(bm, 4 * MS) == bm.bit_count() * 4 * MS
