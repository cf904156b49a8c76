"""Phasor extraction, symmetrical components, unbalance factors, and the
CSV/event-log round trips."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfmsim.analysis import (
    SlidingPhasorBank,
    UndefinedMetricError,
    WarmingUpError,
    phasor_extract,
    power_sharing_error,
    read_csv,
    read_event_log,
    sequence_components,
    sequence_components_complex,
    unbalance_factors,
    write_csv,
    write_event_log,
)

F0 = 60.0
W0 = 2 * np.pi * F0
DT = 50e-6
N_WIN = round(1 / (F0 * DT))


def window(fn):
    t = np.arange(N_WIN) * DT
    return fn(t), t


class TestPhasorExtract:
    def test_cosine_reference(self):
        x, t = window(lambda t: np.cos(W0 * t))
        ph = phasor_extract(x, F0, DT, t_end=t[-1])
        assert abs(ph) == pytest.approx(1.0, abs=5e-3)
        assert math.degrees(abs(np.angle(ph))) < 0.5

    def test_zero_signal(self):
        ph = phasor_extract(np.zeros(N_WIN), F0, DT)
        assert abs(ph) == 0.0

    def test_harmonic_rejection(self):
        x, t = window(lambda t: np.cos(W0 * t) + 0.1 * np.cos(5 * W0 * t + 0.4))
        ph = phasor_extract(x, F0, DT, t_end=t[-1])
        assert abs(ph) == pytest.approx(1.0, abs=0.01)

    def test_warming_up(self):
        with pytest.raises(WarmingUpError):
            phasor_extract(np.zeros(10), F0, DT)


class TestSlidingBank:
    def test_time_invariant_after_warmup(self):
        bank = SlidingPhasorBank(2, F0, DT)
        mags = []
        for k in range(3 * N_WIN):
            t = k * DT
            x = np.array([np.cos(W0 * t + 0.3), 0.5 * np.cos(W0 * t - 1.0)])
            bank.update(x, t)
            if bank.warmed and k >= N_WIN:
                mags.append(bank.magnitudes().copy())
        mags = np.array(mags)
        # production dt gives a fractional window; ripple stays a few 1e-5
        assert np.ptp(mags[:, 0]) < 1e-4
        assert np.ptp(mags[:, 1]) < 1e-4
        assert mags[-1, 0] == pytest.approx(1.0, abs=5e-4)
        assert mags[-1, 1] == pytest.approx(0.5, abs=5e-4)

    def test_exact_window_is_time_invariant(self):
        # with the period an exact number of steps the estimate is flat
        # to machine-level precision
        dt = 1.0 / (F0 * 320)
        bank = SlidingPhasorBank(1, F0, dt)
        mags = []
        for k in range(4 * 320):
            t = k * dt
            bank.update(np.array([np.cos(W0 * t)]), t)
            if k >= 2 * 320:
                mags.append(bank.magnitudes()[0])
        assert np.ptp(np.array(mags)) < 1e-6

    def test_phasor_angle_convention(self):
        bank = SlidingPhasorBank(1, F0, DT)
        phase = 0.77
        for k in range(2 * N_WIN):
            t = k * DT
            bank.update(np.array([2.0 * np.cos(W0 * t + phase)]), t)
        ph = bank.phasors()[0]
        assert np.angle(ph) == pytest.approx(phase, abs=0.01)
        assert abs(ph) == pytest.approx(2.0, abs=0.01)


def pol(mag, deg):
    return mag * np.exp(1j * math.radians(deg))


class TestSequenceComponents:
    def test_balanced_positive_set(self):
        vp, vn, v0 = sequence_components([pol(1, 0), pol(1, -120), pol(1, 120)])
        assert vp == pytest.approx(1.0, abs=1e-12)
        assert vn == pytest.approx(0.0, abs=1e-12)
        assert v0 == pytest.approx(0.0, abs=1e-12)

    def test_pure_negative_set(self):
        vp, vn, v0 = sequence_components([pol(1, 0), pol(1, 120), pol(1, -120)])
        assert (vp, v0) == (pytest.approx(0, abs=1e-12), pytest.approx(0, abs=1e-12))
        assert vn == pytest.approx(1.0, abs=1e-12)

    def test_collapsed_phase_matches_matrix_oracle(self):
        phasors = np.array([pol(1, 0), 0.0, pol(1, 120)])
        a = np.exp(2j * np.pi / 3)
        m = np.array([[1, a, a**2], [1, a**2, a], [1, 1, 1]]) / 3.0
        expect = np.abs(m @ phasors)
        got = sequence_components(phasors)
        assert np.allclose(got, expect, atol=1e-14)

    @given(st.lists(st.tuples(st.floats(0, 2), st.floats(-180, 180)),
                    min_size=3, max_size=3))
    @settings(max_examples=100, deadline=None)
    def test_fortescue_round_trip(self, polar):
        phasors = np.array([pol(m, d) for m, d in polar])
        seq = sequence_components_complex(phasors)
        a = np.exp(2j * np.pi / 3)
        synth = np.array([
            seq[0] + seq[1] + seq[2],
            a**2 * seq[0] + a * seq[1] + seq[2],
            a * seq[0] + a**2 * seq[1] + seq[2],
        ])
        assert np.allclose(synth, phasors, atol=1e-12)


class TestUnbalanceFactors:
    def test_balanced_is_zero(self):
        uf = unbalance_factors(1.0, 0.0, [0.5, 0.5, 0.5], [0.1, 0.1, 0.1])
        assert uf.v_uf == 0.0
        assert uf.p_uf == pytest.approx(0.0, abs=1e-15)
        assert uf.q_uf == pytest.approx(0.0, abs=1e-15)

    def test_tabulated_substitution(self):
        uf = unbalance_factors(0.98, 0.049, [0.6, 0.5, 0.4], [0.3, 0.2, 0.1])
        assert uf.v_uf == pytest.approx(0.05)
        assert uf.p_uf == pytest.approx(0.1)
        assert uf.q_uf == pytest.approx(0.1)

    def test_undefined_for_dead_bus(self):
        with pytest.raises(UndefinedMetricError):
            unbalance_factors(0.0, 0.1, [0, 0, 0], [0, 0, 0])

    @given(st.floats(0.1, 10))
    @settings(max_examples=50, deadline=None)
    def test_scale_invariance(self, scale):
        uf1 = unbalance_factors(1.0, 0.07, [0.6, 0.5, 0.4], [0, 0, 0])
        uf2 = unbalance_factors(scale * 1.0, scale * 0.07, [0.6, 0.5, 0.4], [0, 0, 0])
        assert uf1.v_uf == pytest.approx(uf2.v_uf)

    @given(st.floats(-5, 5))
    @settings(max_examples=50, deadline=None)
    def test_p_uf_shift_invariance(self, shift):
        p = np.array([0.6, 0.5, 0.4])
        uf1 = unbalance_factors(1.0, 0.0, p, [0, 0, 0])
        uf2 = unbalance_factors(1.0, 0.0, p + shift, [0, 0, 0])
        assert uf1.p_uf == pytest.approx(uf2.p_uf, abs=1e-12)


class TestSharing:
    def test_equal_split_is_zero(self):
        assert power_sharing_error([1e6, 1e6], [3e6, 3e6]) == 0.0

    def test_ten_percent_deviation(self):
        assert power_sharing_error([1.1e6, 0.9e6], [3e6, 3e6]) == pytest.approx(0.1)

    def test_rating_proportional(self):
        # 2:1 ratings carrying 2:1 power -> perfect share
        assert power_sharing_error([2e6, 1e6], [6e6, 3e6]) == pytest.approx(0.0)

    def test_needs_two_converters(self):
        with pytest.raises(UndefinedMetricError):
            power_sharing_error([1e6], [3e6])


class _StubRecord:
    def csv_columns(self):
        t = np.arange(5) * 0.01
        return (
            ["time_s", "va_pu", "breaker"],
            [t, np.array([1.23456789012, 0.5, 2 / 3, 1e-7, 42.0]),
             np.array([0.0, 1, 1, 0, 1])],
        )


class TestSerialization:
    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "run.csv"
        write_csv(_StubRecord(), path)
        names, data = read_csv(path)
        assert names == ["time_s", "va_pu", "breaker"]
        want = np.column_stack(_StubRecord().csv_columns()[1])
        assert np.allclose(data, want, rtol=1e-8, atol=1e-15)
        with open(path) as f:
            first = f.readline()
        assert first.startswith("#")   # documented column order

    def test_event_log_round_trip(self, tmp_path):
        path = tmp_path / "events.tsv"
        events = [(0.0, "timeline", "energize_converter", "vsc1"),
                  (21.0, "relay:L692", "trip", "overcurrent definite time")]
        write_event_log(events, path)
        assert read_event_log(path) == events
