"""Analytic steady-state response of a damped bar near a longitudinal mode.

The bar is driven at one end and observed at the other. Near mode ``n`` the
normalized end-to-end transfer is

    a(f)   = U0 / sqrt(cosh^2(alpha L) - cos^2(x))
    phi(f) = pi n - arctan(tan(x) / tanh(alpha L))

with ``x = pi n f / f_res``, so that ``f_res`` is the resonance frequency of
the tracked mode itself. A single (a, phi) measurement at a known drive
frequency can be inverted in closed form for ``(f_res, alpha)``.

Setup effects are modelled as an affine amplitude gain ``q0 + q1 f`` (replacing
U0) and an affine phase shift ``p0 + p1 f`` (replacing ``pi n``). They are
fitted once from a low-amplitude sweep and removed from every later
measurement.

Everything here is a pure function; scalars and numpy arrays are both
accepted where it makes sense.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import least_squares

from .errors import (
    CalibrationRangeError,
    ConvergenceError,
    DegenerateMeasurementError,
    DomainError,
    InconsistentMeasurementError,
    ResonanceNotBracketedError,
)

# Below this phase deviation the inversion uses the exact resonance limit.
PHASE_EPS = 1e-9
# Half-width of the single-mode validity window, as a fraction of f_res.
VALIDITY_FRACTION = 0.25
# tanh^2(alpha L) may exceed 1 by this much before the point is rejected.
_MANIFOLD_TOL = 1e-12


class Geometry(NamedTuple):
    length: float
    mode_n: int = 1
    scale: float = 1.0


@dataclass(frozen=True)
class ModaneParams:
    """Intrinsic resonator description.

    Attributes
    ----------
    f_res : resonance frequency of mode ``mode_n`` [Hz]
    alpha : damping coefficient [1/m]
    length : bar length [m]
    mode_n : longitudinal mode index
    scale : source amplitude U0 of the normalized formulation
    """

    f_res: float
    alpha: float
    length: float
    mode_n: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if not self.f_res > 0:
            raise ValueError(f"f_res must be positive, got {self.f_res}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not self.length > 0:
            raise ValueError(f"length must be positive, got {self.length}")
        if int(self.mode_n) != self.mode_n or self.mode_n < 1:
            raise ValueError(f"mode_n must be a positive integer, got {self.mode_n}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def alpha_l(self) -> float:
        return self.alpha * self.length

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.length, self.mode_n, self.scale)

    @property
    def quality_factor(self) -> float:
        return math.pi / (2.0 * math.tanh(self.alpha_l))


@dataclass(frozen=True)
class CalibrationParams:
    """Affine setup corrections plus the low-amplitude reference model.

    ``q0 + q1 f`` multiplies the amplitude, ``p0 + p1 f`` is added to the
    phase. The corrections are only trusted inside ``[f_min, f_max]``.
    """

    q0: float
    q1: float
    p0: float
    p1: float
    ref_model: ModaneParams
    f_min: float
    f_max: float
    residual_rms: float = float("nan")

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ValueError("calibration band needs f_min < f_max")
        if min(self.gain(self.f_min), self.gain(self.f_max)) <= 0:
            raise CalibrationRangeError("q0 + q1 f must stay positive over the band")

    def gain(self, f):
        return self.q0 + self.q1 * f

    def offset(self, f):
        return self.p0 + self.p1 * f

    def check_band(self, f):
        f = np.asarray(f, dtype=float)
        if np.any(f < self.f_min) or np.any(f > self.f_max):
            raise CalibrationRangeError(
                f"frequency outside calibrated band [{self.f_min}, {self.f_max}] Hz"
            )

    @classmethod
    def identity(cls, ref_model, f_min=None, f_max=None):
        """No setup correction: unit gain, zero phase shift."""
        if f_min is None:
            f_min = ref_model.f_res * (1 - VALIDITY_FRACTION)
        if f_max is None:
            f_max = ref_model.f_res * (1 + VALIDITY_FRACTION)
        return cls(1.0, 0.0, 0.0, 0.0, ref_model, f_min, f_max)


@dataclass(frozen=True)
class ResponsePoint:
    amplitude: float
    phase: float


@dataclass(frozen=True)
class InversionResult:
    f_res_est: float
    alpha_est: float
    r_intermediate: float


@dataclass(frozen=True)
class Measurement:
    """Observables of one acquisition after calibration.

    ``delta_phi`` is the deviation from the resonance phase, ``phi`` the
    model-frame phase (``delta_phi + pi n``).
    """

    f: float
    a: float
    phi: float
    delta_phi: float
    A: float = float("nan")
    z: complex = complex("nan")
    strain: float = float("nan")


def wrap_phase(phi):
    """Reduce phase to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(phi, dtype=float), 2 * np.pi)
    return out if np.ndim(out) else float(out)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def _detuning(f, f_res, mode_n):
    # Offset of the wave argument from pi n; computed directly to keep digits.
    return np.pi * mode_n * (f - f_res) / f_res


def _check_window(f, f_res, mode_n):
    frac = min(VALIDITY_FRACTION, 0.45 / mode_n)
    rel = np.abs(np.asarray(f, dtype=float) / f_res - 1.0)
    if np.any(~(rel <= frac)):
        raise DomainError(
            f"frequency outside single-mode window of +/-{frac:.0%} around {f_res} Hz"
        )


def _shape(f, f_res, alpha_l, mode_n):
    """Uncalibrated amplitude (per unit U0) and phase lag term."""
    d = _detuning(f, f_res, mode_n)
    # cosh^2(aL) - cos^2(x) == sinh^2(aL) + sin^2(x), without cancellation
    amp = 1.0 / np.sqrt(np.sinh(alpha_l) ** 2 + np.sin(d) ** 2)
    lag = np.arctan2(np.sin(d), np.tanh(alpha_l) * np.cos(d))
    return amp, lag


def forward_response(f, model: ModaneParams, cal: CalibrationParams | None = None):
    """Steady-state amplitude and phase at drive frequency ``f``.

    Without ``cal`` the phase lies on the branch around ``pi n``. With ``cal``
    the result is what the acquisition chain would report: amplitude scaled by
    ``q0 + q1 f`` and phase ``p0 + p1 f - arctan(...)``.
    """
    f = np.asarray(f, dtype=float)
    _check_window(f, model.f_res, model.mode_n)
    amp, lag = _shape(f, model.f_res, model.alpha_l, model.mode_n)
    if cal is None:
        a = model.scale * amp
        phi = np.pi * model.mode_n - lag
    else:
        cal.check_band(f)
        g = cal.gain(f)
        if np.any(g <= 0):
            raise CalibrationRangeError("non-positive calibration gain")
        a = g * amp
        phi = cal.offset(f) - lag
    return ResponsePoint(_scalar(a), _scalar(phi))


def forward_transfer(f, model: ModaneParams, cal: CalibrationParams | None = None):
    """Complex transfer ``a exp(j phi)`` from :func:`forward_response`."""
    pt = forward_response(f, model, cal)
    z = np.asarray(pt.amplitude) * np.exp(1j * np.asarray(pt.phase))
    return complex(z) if np.ndim(z) == 0 else z


def invert_response(point: ResponsePoint, f, geometry) -> InversionResult:
    """Closed-form estimate of ``(f_res, alpha)`` from one (a, phi) point.

    ``geometry`` is ``(length, mode_n, scale)``. The auxiliary quantity

        r = -rho^2 - cos 2phi + sqrt(1 + rho^4 + 2 rho^2 cos 2phi),  rho = a/U0

    is evaluated as ``sin^2(2phi) / (sqrt(...) + rho^2 + cos 2phi)`` whenever
    that denominator is positive, which is the same number without the
    cancellation that ruins it at high Q. The same substitution turns
    ``r / (2 cos^2 phi)`` and ``r / (2 sin^2 phi)`` into ratios that stay
    finite at resonance.
    """
    length, mode_n, scale = Geometry(*geometry)
    a = np.asarray(point.amplitude, dtype=float)
    f = np.asarray(f, dtype=float)
    if np.any(~(a > 0)):
        raise DegenerateMeasurementError("response amplitude must be positive")
    dphi = np.asarray(wrap_phase(np.asarray(point.phase) - np.pi * mode_n))
    if np.any(np.abs(dphi) >= np.pi / 2):
        raise InconsistentMeasurementError(
            "phase deviation beyond +/-pi/2 from the resonance branch"
        )

    rho2 = (a / scale) ** 2
    c2 = np.cos(2 * dphi)
    s2 = np.sin(2 * dphi)
    u = rho2 + c2
    root = np.hypot(u, s2)  # sqrt(1 + rho^4 + 2 rho^2 cos 2phi)
    stable = u > 0
    den = np.where(stable, root + u, 1.0)
    r = np.where(stable, s2**2 / den, root - u)
    sin2 = np.sin(dphi) ** 2
    cos2 = np.cos(dphi) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        tan_sq = np.where(stable, 2 * sin2 / den, r / (2 * cos2))
        tanh_sq = np.where(stable, 2 * cos2 / den, r / (2 * sin2))

    if np.any(~(tanh_sq < 1 + _MANIFOLD_TOL)):
        raise InconsistentMeasurementError(
            "amplitude too large for the measured phase (tanh(alpha L) >= 1)"
        )
    tanh_sq = np.minimum(tanh_sq, 1 - 1e-16)
    detune = -np.sign(dphi) * np.arctan(np.sqrt(tan_sq))
    f_res = f / (1.0 + detune / (np.pi * mode_n))
    alpha_l = np.arctanh(np.sqrt(tanh_sq))

    at_res = np.abs(dphi) < PHASE_EPS
    if np.any(at_res):
        f_res = np.where(at_res, f, f_res)
        alpha_l = np.where(at_res, np.arcsinh(scale / a), alpha_l)
    return InversionResult(_scalar(f_res), _scalar(alpha_l / length), _scalar(r))


def phase_slope(f_res, alpha, length, mode_n=1):
    """Local slope d(phi)/df at resonance [rad/Hz]; always negative."""
    if np.any(np.asarray(f_res) <= 0) or np.any(np.asarray(alpha) <= 0) or length <= 0:
        raise ValueError("phase_slope needs positive f_res, alpha and length")
    return _scalar(-np.pi * mode_n / (np.asarray(f_res) * np.tanh(np.asarray(alpha) * length)))


def apply_calibration(z, f, cal: CalibrationParams) -> Measurement:
    """Strip setup effects from a measured transfer ``z`` taken at ``f``."""
    cal.check_band(f)
    g = cal.gain(f)
    if g <= 0:
        raise CalibrationRangeError("non-positive calibration gain")
    z = complex(z)
    dphi = wrap_phase(math.atan2(z.imag, z.real) - cal.offset(f))
    return Measurement(
        f=float(f),
        a=abs(z) / g,
        phi=dphi + math.pi * cal.ref_model.mode_n,
        delta_phi=dphi,
        z=z,
    )


# --------------------------------------------------------------------------
# Calibration fit
# --------------------------------------------------------------------------


def _half_power_width(f, mag2, k):
    """Full width at half power around index ``k`` (linear interpolation)."""
    half = mag2[k] / 2.0
    edges = []
    for step in (-1, 1):
        j = k
        while 0 <= j + step < len(f) and mag2[j + step] > half:
            j += step
        if not 0 <= j + step < len(f):
            edges.append(None)
            continue
        f0, f1, m0, m1 = f[j], f[j + step], mag2[j], mag2[j + step]
        edges.append(f0 + (half - m0) * (f1 - f0) / (m1 - m0))
    lo, hi = edges
    if lo is None and hi is None:
        return None
    if lo is None:
        return 2 * (hi - f[k])
    if hi is None:
        return 2 * (f[k] - lo)
    return hi - lo


def _initial_guess(f, z, mode_n):
    mag = np.abs(z)
    k = int(np.argmax(mag))
    f_res = f[k]
    if 0 < k < len(f) - 1:
        # parabolic refinement of the peak on |Z|^2
        y0, y1, y2 = mag[k - 1] ** 2, mag[k] ** 2, mag[k + 1] ** 2
        curv = y0 - 2 * y1 + y2
        if curv < 0:
            f_res = f[k] + 0.5 * (y0 - y2) / curv * (f[k + 1] - f[k])
    width = _half_power_width(f, mag**2, k)
    if width is None or width <= 0:
        width = 3 * np.median(np.diff(f))
    alpha_l = np.pi * mode_n * width / (2 * f_res)

    amp, lag = _shape(f, f_res, alpha_l, mode_n)
    q = np.polyfit(f, mag / amp, 1, w=mag / mag.max())

    resid = np.unwrap(np.angle(z)) + lag
    n_outer = max(2, len(f) // 8)
    outer = np.r_[0:n_outer, len(f) - n_outer : len(f)]
    p1 = np.polyfit(f[outer], resid[outer], 1)[0]
    p0 = float(np.mean(resid - p1 * f))
    return f_res, alpha_l, q[1], q[0], p0, p1


def fit_calibration(f, z, length, mode_n=1, max_iter=200) -> CalibrationParams:
    """Joint complex least-squares fit of the calibrated model to a sweep.

    Fits ``(f_res, alpha, q0, q1, p0, p1)`` by minimising ``|Z_model - Z|``
    over all sweep points. The complex residual weights phase errors by the
    local amplitude, so the low-SNR tails count little.
    """
    f = np.asarray(f, dtype=float)
    z = np.asarray(z, dtype=complex)
    if f.shape != z.shape or f.ndim != 1:
        raise ValueError("f and z must be 1-D arrays of equal length")
    if len(f) < 20:
        raise ValueError("calibration sweep needs at least 20 points")
    order = np.argsort(f)
    f, z = f[order], z[order]
    k = int(np.argmax(np.abs(z)))
    if k == 0 or k == len(f) - 1:
        raise ResonanceNotBracketedError(
            f"amplitude maximum at sweep edge ({f[k]} Hz); resonance not bracketed"
        )

    fc = 0.5 * (f[0] + f[-1])
    fs = 0.5 * (f[-1] - f[0])
    u = (f - fc) / fs
    f_res0, al0, q0, q1, p0, p1 = _initial_guess(f, z, mode_n)
    x0 = np.array([f_res0, al0, q0 + q1 * fc, q1 * fs, p0 + p1 * fc, p1 * fs])

    def model(x):
        f_res, al, qc, qs, pc, ps = x
        d = _detuning(f, f_res, mode_n)
        return (qc + qs * u) * np.exp(1j * (pc + ps * u)) / np.sinh(al + 1j * d)

    def residual(x):
        r = model(x) - z
        return np.concatenate([r.real, r.imag])

    def jac(x):
        f_res, al, qc, qs, pc, ps = x
        d = _detuning(f, f_res, mode_n)
        zm = model(x)
        coth = 1.0 / np.tanh(al + 1j * d)
        q = qc + qs * u
        cols = [
            zm * coth * 1j * np.pi * mode_n * f / f_res**2,
            -zm * coth,
            zm / q,
            zm * u / q,
            1j * zm,
            1j * zm * u,
        ]
        J = np.column_stack(cols)
        return np.vstack([J.real, J.imag])

    sol = least_squares(
        residual,
        x0,
        jac=jac,
        method="lm",
        x_scale="jac",
        xtol=1e-10,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=max_iter,
    )
    rms = float(np.sqrt(np.mean(np.abs(model(sol.x) - z) ** 2)))
    if sol.status <= 0 or not np.all(np.isfinite(sol.x)):
        raise ConvergenceError(
            f"calibration fit did not converge ({sol.message})", rms, sol.nfev
        )

    f_res, al, qc, qs, pc, ps = sol.x
    if f_res <= 0 or al <= 0:
        raise ConvergenceError("calibration fit left the physical domain", rms, sol.nfev)
    if qc < 0:
        # (-q, p + pi) is the same complex gain
        qc, qs, pc = -qc, -qs, pc + np.pi
    q1 = qs / fs
    p1 = ps / fs
    q0 = qc - q1 * fc
    p0 = wrap_phase(pc - p1 * fc)
    ref = ModaneParams(float(f_res), float(al / length), float(length), int(mode_n))
    return CalibrationParams(
        float(q0), float(q1), float(p0), float(p1), ref, float(f[0]), float(f[-1]), rms
    )


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def write_sweep_csv(path, f, z):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f_hz", "re_z", "im_z"])
        for fi, zi in zip(f, z):
            w.writerow([repr(float(fi)), repr(float(zi.real)), repr(float(zi.imag))])


def read_sweep_csv(path):
    f, z = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            f.append(float(row["f_hz"]))
            z.append(complex(float(row["re_z"]), float(row["im_z"])))
    return np.array(f), np.array(z)


_PARAM_KEYS = ("f_res", "alpha", "length", "mode_n", "q0", "q1", "p0", "p1", "f_min", "f_max")


def write_params(path, cal: CalibrationParams):
    """Write calibration as ``key=value`` lines (Hz, rad, 1/m)."""
    ref = cal.ref_model
    values = {
        "f_res": ref.f_res,
        "alpha": ref.alpha,
        "length": ref.length,
        "mode_n": ref.mode_n,
        "q0": cal.q0,
        "q1": cal.q1,
        "p0": cal.p0,
        "p1": cal.p1,
        "f_min": cal.f_min,
        "f_max": cal.f_max,
        "residual_rms": cal.residual_rms,
    }
    Path(path).write_text("".join(f"{k}={v!r}\n" for k, v in values.items()))


def read_params(path) -> CalibrationParams:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    missing = [k for k in _PARAM_KEYS if k not in values]
    if missing:
        raise ValueError(f"params file missing keys: {', '.join(missing)}")
    ref = ModaneParams(
        float(values["f_res"]),
        float(values["alpha"]),
        float(values["length"]),
        int(values["mode_n"]),
    )
    return CalibrationParams(
        float(values["q0"]),
        float(values["q1"]),
        float(values["p0"]),
        float(values["p1"]),
        ref,
        float(values["f_min"]),
        float(values["f_max"]),
        float(values.get("residual_rms", "nan")),
    )
