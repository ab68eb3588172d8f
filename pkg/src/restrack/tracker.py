"""Discrete-time resonance tracking controller.

Each iteration takes one calibrated measurement at the current drive
``(f_i, A_i)``, estimates the instantaneous resonance by closed-form
inversion, and picks the frequency for the next drive amplitude:

    f_next = f_i - dphi_i / k_i + l_i (A_next - A_i)

The feedback term removes the observed phase deviation using the local phase
slope ``k``. The feedforward term predicts the resonance shift caused by the
coming amplitude step with the learned coefficient ``l`` (Hz/V). Both ``k``
and ``l`` are smoothed by exponential moving averages.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

from .errors import InconsistentMeasurementError
from .modane import Geometry, Measurement, ResponsePoint, invert_response, phase_slope

MODES = ("off", "fixed_k", "adaptive_k", "full")

NAN = float("nan")


@dataclass(frozen=True)
class TrackerConfig:
    beta: float = 0.5
    beta_prime: float = 0.5
    mode: str = "full"
    inhibition_iters: int = 2
    k_init: float | None = None
    phi_target: float = 0.0
    literal_eq10_sign: bool = False

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ValueError("beta must lie in (0, 1]")
        if not 0 < self.beta_prime <= 1:
            raise ValueError("beta_prime must lie in (0, 1]")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if int(self.inhibition_iters) != self.inhibition_iters or self.inhibition_iters < 0:
            raise ValueError("inhibition_iters must be a non-negative integer")
        if self.k_init is not None and not self.k_init < 0:
            raise ValueError("k_init must be negative")


@dataclass(frozen=True)
class TrackerState:
    i: int
    f_i: float
    A_i: float
    k_i: float | None = None
    l_i: float | None = None
    f_res_prev: float | None = None
    A_prev: float | None = None  # drive amplitude of the estimate in f_res_prev
    inhibit_remaining: int = 0

    @property
    def l_defined(self) -> bool:
        return self.l_i is not None


@dataclass(frozen=True)
class IterationRecord:
    i: int
    f_i: float
    A_i: float
    a_i: float
    delta_phi_i: float
    f_res_est: float
    alpha_est: float
    k_i: float
    l_i: float
    strain: float
    t: float = NAN
    inhibited: bool = False
    inconsistent: bool = False
    unsettled: bool = False  # record started before the transient had decayed

    @property
    def valid(self) -> bool:
        return not (self.inhibited or self.inconsistent)


def initial_state(f0, A0, cfg: TrackerConfig, ref_model=None) -> TrackerState:
    """Start at ``(f0, A0)``; ``k`` comes from ``cfg.k_init`` or the linear reference."""
    k = cfg.k_init
    if k is None and ref_model is not None:
        k = phase_slope(ref_model.f_res, ref_model.alpha, ref_model.length, ref_model.mode_n)
    return TrackerState(i=0, f_i=float(f0), A_i=float(A0), k_i=k)


def update_phase_slope(k_prev, f_res_est, alpha_est, length, beta, mode_n=1):
    """EMA of the slope; ``k_prev=None`` takes the instantaneous value."""
    k_now = phase_slope(f_res_est, alpha_est, length, mode_n)
    if k_prev is None:
        return k_now
    return beta * k_now + (1 - beta) * k_prev


def update_amp_coeff(l_prev, f_res_est, f_res_prev, A_i, A_prev, beta_prime):
    """EMA of the feedforward coefficient; unchanged when the amplitude did not move."""
    if A_prev is None or f_res_prev is None or A_i == A_prev:
        return l_prev
    l_now = (f_res_est - f_res_prev) / (A_i - A_prev)
    if l_prev is None:
        return l_now
    return beta_prime * l_now + (1 - beta_prime) * l_prev


def next_frequency(f_i, delta_phi, k, l, dA, mode="full", literal_sign=False):
    """Frequency for the next iteration given the current deviation and step ``dA``."""
    if mode == "off":
        return f_i
    f_next = f_i - delta_phi / k
    if mode == "full" and l is not None and dA != 0:
        f_next += -l * dA if literal_sign else l * dA
    return f_next


def inhibit(state: TrackerState, iterations: int) -> TrackerState:
    """Freeze frequency and coefficients for the next ``iterations`` iterations."""
    return replace(state, inhibit_remaining=max(state.inhibit_remaining, int(iterations)))


def process_iteration(
    state: TrackerState,
    cfg: TrackerConfig,
    meas: Measurement,
    geometry,
    next_A,
):
    """One tracking step. Returns ``(new_state, f_next, record)``."""
    geometry = Geometry(*geometry)
    next_A = float(next_A)
    dphi = meas.delta_phi - cfg.phi_target

    def frozen(inhibited, inconsistent, remaining):
        rec = IterationRecord(
            state.i, state.f_i, state.A_i, meas.a, dphi, NAN, NAN,
            _num(state.k_i), _num(state.l_i), meas.strain,
            inhibited=inhibited, inconsistent=inconsistent,
        )
        new = replace(state, i=state.i + 1, A_i=next_A, inhibit_remaining=remaining)
        return new, state.f_i, rec

    if state.inhibit_remaining > 0:
        return frozen(True, False, state.inhibit_remaining - 1)

    try:
        est = invert_response(
            ResponsePoint(meas.a, dphi + math.pi * geometry.mode_n), state.f_i, geometry
        )
    except InconsistentMeasurementError:
        return frozen(False, True, 0)

    k = state.k_i
    if k is None or cfg.mode in ("adaptive_k", "full"):
        beta = 1.0 if k is None else cfg.beta
        k = update_phase_slope(
            k, est.f_res_est, est.alpha_est, geometry.length, beta, geometry.mode_n
        )
    l = state.l_i
    if cfg.mode == "full":
        l = update_amp_coeff(
            l, est.f_res_est, state.f_res_prev, state.A_i, state.A_prev, cfg.beta_prime
        )
    f_next = next_frequency(
        state.f_i, dphi, k, l, next_A - state.A_i, cfg.mode, cfg.literal_eq10_sign
    )
    rec = IterationRecord(
        state.i, state.f_i, state.A_i, meas.a, dphi, est.f_res_est, est.alpha_est,
        k, _num(l), meas.strain,
    )
    new = TrackerState(
        i=state.i + 1,
        f_i=f_next,
        A_i=next_A,
        k_i=k,
        l_i=l,
        f_res_prev=est.f_res_est,
        A_prev=state.A_i,
        inhibit_remaining=0,
    )
    return new, f_next, rec


def _num(x):
    return NAN if x is None else float(x)


ITERATION_COLUMNS = (
    "i", "t_s", "f_hz", "a_v", "delta_phi_rad", "f_res_hz",
    "alpha_per_m", "k_rad_per_hz", "l_hz_per_v", "strain",
)


def iteration_row(rec: IterationRecord):
    return [
        str(rec.i), repr(rec.t), repr(rec.f_i), repr(rec.A_i), repr(rec.delta_phi_i),
        repr(rec.f_res_est), repr(rec.alpha_est), repr(rec.k_i), repr(rec.l_i),
        repr(rec.strain),
    ]


def write_iterations_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ITERATION_COLUMNS)
        for rec in records:
            w.writerow(iteration_row(rec))
