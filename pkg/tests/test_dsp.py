import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from restrack.dsp import (
    ComplexPhasor,
    WaveformWindow,
    bin_value,
    single_bin_dft,
    tone_pair,
    transfer_ratio,
    transfer_value,
    velocity_to_strain,
    write_windows_csv,
)
from restrack.errors import AliasingError, ShortWindowError, ZeroDriveError

FS = 5e6


def tone(f, amp, phase, n, fs=FS):
    t = np.arange(n) / fs
    return WaveformWindow(amp * np.cos(2 * np.pi * f * t + phase), fs)


def test_unit_cosine():
    ph = single_bin_dft(tone(8000.0, 1.0, 0.0, 25000), 8000.0)
    assert ph.magnitude == pytest.approx(1.0, abs=1e-12)
    assert ph.phase == pytest.approx(0.0, abs=1e-12)


@given(st.integers(3, 60), st.floats(0.01, 100), st.floats(-3.1, 3.1))
def test_bin_aligned_matches_fft(cycles, amp, phase):
    n = 5000
    f = cycles * FS / n
    win = tone(f, amp, phase, n)
    ref = 2 * np.fft.rfft(win.samples)[cycles] / n
    got = bin_value(win, f)
    assert abs(got - ref) <= 1e-9 * amp
    ph = single_bin_dft(win, f)
    assert ph.magnitude == pytest.approx(amp, rel=1e-9)
    assert ph.phase == pytest.approx(phase, abs=1e-9)


def test_sine_phase():
    n = 5000
    f = 40 * FS / n
    x = np.sin(2 * np.pi * f * np.arange(n) / FS)
    ph = single_bin_dft(WaveformWindow(x, FS), f)
    assert ph.magnitude == pytest.approx(1.0, abs=1e-9)
    assert ph.phase == pytest.approx(-np.pi / 2, abs=1e-9)


def test_two_tone_separation():
    n = 5000
    f1, f2 = 40 * FS / n, 55 * FS / n
    t = np.arange(n) / FS
    x = np.cos(2 * np.pi * f1 * t) + 0.3 * np.cos(2 * np.pi * f2 * t)
    assert abs(bin_value(WaveformWindow(x, FS), f1) - 1.0) < 1e-9


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(5000, 12000))
def test_linearity(a, b, f):
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(2, 4000))
    lhs = bin_value(WaveformWindow(a * x + b * y, FS), f)
    rhs = a * bin_value(WaveformWindow(x, FS), f) + b * bin_value(WaveformWindow(y, FS), f)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(a) + abs(b))


@given(st.integers(1, 400))
def test_shift_theorem(m):
    n, cycles = 10000, 17
    f = cycles * FS / n
    k = np.arange(n)
    base = bin_value(WaveformWindow(np.cos(2 * np.pi * f * k / FS), FS), f)
    shifted = bin_value(WaveformWindow(np.cos(2 * np.pi * f * (k - m) / FS), FS), f)
    assert shifted == pytest.approx(base * np.exp(-2j * np.pi * f * m / FS), abs=1e-9)


def test_leakage_bound_in_quotient():
    # arbitrary (non-aligned) frequencies and response phases, 5 ms at ~8.5 kHz
    rng = np.random.default_rng(7)
    t = np.arange(25000) / FS
    worst = 0.0
    for _ in range(200):
        f = rng.uniform(8000, 9000)
        g, th, ph0 = rng.uniform(0.1, 10), rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi, np.pi)
        tx = WaveformWindow(np.cos(2 * np.pi * f * t + ph0), FS)
        rx = WaveformWindow(g * np.cos(2 * np.pi * f * t + ph0 + th), FS)
        z = transfer_value(tx, rx, f)
        worst = max(worst, abs(np.angle(z / (g * np.exp(1j * th)))))
    assert worst < 1e-2


def test_quotient_cancels_common_leakage():
    # non-integer cycles, rx a scaled copy of tx: quotient is exact
    tx = tone(8123.4, 2.0, 0.3, 25000)
    rx = WaveformWindow(-0.5 * tx.samples, FS)
    assert transfer_value(tx, rx, 8123.4) == pytest.approx(-0.5, abs=1e-12)


def test_delay_phase():
    f, tau, n = 8000.0, 15e-6, 25000
    t = np.arange(n) / FS
    tx = WaveformWindow(np.cos(2 * np.pi * f * t), FS)
    rx = WaveformWindow(0.3 * np.cos(2 * np.pi * f * (t - tau)), FS)
    r = transfer_ratio(tx, rx, f)
    assert r.magnitude == pytest.approx(0.3, rel=1e-9)
    assert r.phase == pytest.approx(-2 * np.pi * f * tau, abs=1e-9)


def test_tone_pair_matches_bins():
    tx = tone(8000.0, 1.0, 0.1, 20000)
    rx = tone(8000.0, 0.2, -1.0, 20000)
    t, r = tone_pair(tx, rx, 8000.0)
    assert t == bin_value(tx, 8000.0)
    assert r == bin_value(rx, 8000.0)


def test_errors():
    win = tone(1000.0, 1.0, 0.0, 100, fs=1e4)
    with pytest.raises(AliasingError):
        bin_value(win, 6000.0)
    with pytest.raises(ShortWindowError):
        bin_value(win, 150.0)
    zero = WaveformWindow(np.zeros(100), 1e4)
    with pytest.raises(ZeroDriveError):
        transfer_value(zero, win, 1000.0)
    with pytest.raises(ValueError):
        tone_pair(win, tone(1000.0, 1.0, 0.0, 99, fs=1e4), 1000.0)


def test_phasor_round_trip():
    c = 0.3 - 0.4j
    assert ComplexPhasor.from_complex(c).to_complex() == pytest.approx(c)


def test_strain():
    assert velocity_to_strain(2.38e-2, 2380.0) == pytest.approx(1e-5)
    with pytest.raises(ValueError):
        velocity_to_strain(1.0, 0.0)


def test_windows_csv(tmp_path):
    tx = tone(1000.0, 1.0, 0.0, 50, fs=1e4)
    write_windows_csv(tmp_path / "w.csv", tx, tx)
    lines = (tmp_path / "w.csv").read_text().splitlines()
    assert lines[0] == "time_s,tx,rx"
    assert len(lines) == 51
    assert float(lines[2].split(",")[0]) == pytest.approx(1e-4)
