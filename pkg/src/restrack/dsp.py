"""Single-frequency phasor extraction from recorded waveform windows.

No window function is applied: the tracker drives arbitrary frequencies, so
windows are rarely an integer number of periods, but the leakage largely
cancels in the rx/tx quotient taken at the same frequency.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import AliasingError, ShortWindowError, ZeroDriveError

# |tx| phasor below this is treated as no drive at all.
ZERO_DRIVE_FLOOR = 1e-12


@dataclass(frozen=True)
class WaveformWindow:
    samples: np.ndarray
    sample_rate: float
    start_time: float = 0.0

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def times(self) -> np.ndarray:
        return self.start_time + np.arange(len(self.samples)) / self.sample_rate


@dataclass(frozen=True)
class ComplexPhasor:
    magnitude: float
    phase: float

    @classmethod
    def from_complex(cls, c: complex) -> "ComplexPhasor":
        return cls(abs(c), math.atan2(c.imag, c.real))

    def to_complex(self) -> complex:
        return self.magnitude * complex(math.cos(self.phase), math.sin(self.phase))


def _check(win: WaveformWindow, f: float):
    if not f > 0:
        raise ValueError("analysis frequency must be positive")
    if f >= win.sample_rate / 2:
        raise AliasingError(f"{f} Hz is at or above Nyquist ({win.sample_rate / 2} Hz)")
    if len(win.samples) < 2 * win.sample_rate / f:
        raise ShortWindowError(f"window shorter than two periods of {f} Hz")


def _kernel(n: int, f: float, fs: float) -> np.ndarray:
    return np.exp(-2j * np.pi * (f / fs) * np.arange(n))


def bin_value(win: WaveformWindow, f: float) -> complex:
    """Complex tone amplitude (2/N) sum x[m] exp(-j 2 pi f m / fs)."""
    _check(win, f)
    x = np.asarray(win.samples, dtype=float)
    return complex(2.0 / len(x) * (x @ _kernel(len(x), f, win.sample_rate)))


def single_bin_dft(win: WaveformWindow, f: float) -> ComplexPhasor:
    """Amplitude and phase of the component at ``f``.

    A unit cosine with an integer number of cycles in the window gives
    magnitude 1 and phase 0.
    """
    return ComplexPhasor.from_complex(bin_value(win, f))


def tone_pair(tx: WaveformWindow, rx: WaveformWindow, f: float):
    """Complex tone amplitudes of tx and rx at ``f``, sharing one kernel."""
    if tx.sample_rate != rx.sample_rate or len(tx.samples) != len(rx.samples):
        raise ValueError("tx and rx windows must share sample rate and length")
    _check(tx, f)
    k = _kernel(len(tx.samples), f, tx.sample_rate)
    scale = 2.0 / len(k)
    t = scale * (np.asarray(tx.samples, dtype=float) @ k)
    r = scale * (np.asarray(rx.samples, dtype=float) @ k)
    return complex(t), complex(r)


def transfer_value(tx: WaveformWindow, rx: WaveformWindow, f: float) -> complex:
    """Complex quotient DFT(rx)/DFT(tx) at ``f``."""
    t, r = tone_pair(tx, rx, f)
    if abs(t) <= ZERO_DRIVE_FLOOR:
        raise ZeroDriveError("no drive signal at the analysis frequency")
    return r / t


def transfer_ratio(tx: WaveformWindow, rx: WaveformWindow, f: float) -> ComplexPhasor:
    return ComplexPhasor.from_complex(transfer_value(tx, rx, f))


def velocity_to_strain(v_amplitude, v_l):
    """Strain at mid-bar from end velocity amplitude (linear approximation)."""
    if not v_l > 0:
        raise ValueError("wave speed must be positive")
    return v_amplitude / v_l


def write_windows_csv(path, tx: WaveformWindow, rx: WaveformWindow):
    """Dump a tx/rx pair as ``time_s, tx, rx`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "tx", "rx"])
        for t, a, b in zip(tx.times(), tx.samples, rx.samples):
            w.writerow([repr(float(t)), repr(float(a)), repr(float(b))])
