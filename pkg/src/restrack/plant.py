"""Virtual sandstone bar: a single resonant mode with fast and slow nonlinearity.

Strain softens the mode and raises its damping. At equilibrium the shifts are

    df_eq(eps)    = -c_q eps^2                              eps <= eps_x
                  = -(c_q eps_x^2 + c_l (eps - eps_x))      eps >  eps_x,  c_l = 2 c_q eps_x
    dalpha_eq(eps) = d_l eps

A fraction ``fast_fraction`` of that shift follows the instantaneous strain.
The rest is carried by a bank of first-order relaxators whose conditioning
states chase the normalized target ``df_eq(eps) / df_eq(eps_sat)``. Log-uniform
time constants make conditioning and recovery approximately linear in log
time, and the lag between the bank and the strain produces the
loading/unloading hysteresis.

The response is a complex envelope (velocity phasor at the free end, m/s)
relative to the generator carrier. It relaxes toward the calibrated
steady-state transfer at rate ``1/tau_tr + j 2 pi (f - f_res)``, i.e. the
free oscillation of an SDOF resonator whose phase slope at resonance matches
the analytic model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dsp import WaveformWindow
from .modane import CalibrationParams, ModaneParams


def log_uniform_bank(tau_min, tau_max, count, weight=None):
    """Relaxators with time constants log-spaced over [tau_min, tau_max].

    Weights are uniform unless ``weight`` (a callable of tau) is given; they
    are normalized to sum to 1.
    """
    taus = np.logspace(math.log10(tau_min), math.log10(tau_max), count)
    w = np.ones(count) if weight is None else np.array([weight(t) for t in taus], float)
    w = w / w.sum()
    return tuple((float(wi), float(ti)) for wi, ti in zip(w, taus))


def merge_banks(*groups):
    """Combine ``(share, bank)`` groups into one bank whose weights sum to 1."""
    total = sum(share for share, _ in groups)
    return tuple((share * w / total, t) for share, bank in groups for w, t in bank)


@dataclass(frozen=True)
class PlantConfig:
    base_model: ModaneParams
    true_cal: CalibrationParams
    v_l: float
    c_q: float  # Hz per strain^2
    eps_x: float  # quadratic-to-linear crossover strain
    d_l: float  # (1/m) per strain
    relaxators: tuple  # ((weight, tau_s), ...)
    fast_fraction: float = 0.5
    eps_sat: float = 1e-5  # strain at which the conditioning level reaches 1
    noise_rms: float = 0.0  # per-sample, fraction of steady rx amplitude
    monitor_ratio: float = 0.01  # tx monitor volts per drive volt
    max_substep: float = 0.05  # s

    def __post_init__(self):
        for name in ("v_l", "eps_sat", "monitor_ratio", "max_substep"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("c_q", "eps_x", "d_l", "noise_rms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.fast_fraction <= 1.0:
            raise ValueError("fast_fraction must lie in [0, 1]")
        if not self.relaxators:
            raise ValueError("relaxator bank is empty")
        w = np.array([r[0] for r in self.relaxators], float)
        tau = np.array([r[1] for r in self.relaxators], float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("relaxator weights must be non-negative and sum to 1")
        if np.any(tau <= 0):
            raise ValueError("relaxator time constants must be positive")
        object.__setattr__(self, "_w", w)
        object.__setattr__(self, "_tau", tau)

    @property
    def c_l(self) -> float:
        return 2.0 * self.c_q * self.eps_x

    @property
    def weights(self) -> np.ndarray:
        return self._w

    @property
    def taus(self) -> np.ndarray:
        return self._tau

    def log_linear_window(self, t_cond=math.inf):
        """Relaxation times over which recovery is close to linear in log t.

        Bounded by the bank (10 tau_min, tau_max / 10) and, after a finite
        conditioning time, by t_cond / 6 since longer relaxators were only
        partly conditioned.
        """
        return 10.0 * self._tau.min(), min(self._tau.max() / 10.0, t_cond / 6.0)

    @property
    def drive_to_strain(self) -> float:
        """Strain per drive volt at the linear resonance."""
        m = self.base_model
        gain = self.true_cal.gain(m.f_res) / math.sinh(m.alpha_l)
        return self.monitor_ratio * gain / self.v_l


def default_plant_config(
    f_res=8500.0,
    alpha_l=0.03,
    length=0.14,
    mode_n=1,
    strain_full=1e-5,
    drive_full=150.0,
    damping_rise=0.25,
    bank_tau_min=3e-3,
    bank_tau_max=1e4,
    bank_per_decade=8,
    bank_tilt=0.05,
    **overrides,
) -> PlantConfig:
    """Scale-matched to a 140 mm sandstone bar at ~8.5 kHz, 150 V max drive.

    ``strain_full`` is the strain reached at ``drive_full`` on the linear
    resonance; ``damping_rise`` the equilibrium relative increase of alpha at
    that strain. Bank weights scale as ``tau**-bank_tilt``; the slight tilt
    toward short times shrinks the loop on slow schedules. Remaining
    PlantConfig fields may be overridden by keyword.
    """
    model = ModaneParams(f_res, alpha_l / length, length, mode_n)
    v_l = 2 * length * f_res / mode_n
    monitor = overrides.get("monitor_ratio", 0.01)
    q0 = strain_full * v_l / (drive_full * monitor) * math.sinh(alpha_l)
    cal = CalibrationParams(
        q0=q0 * (1 + 0.02 * f_res / 1000.0),
        q1=-q0 * 0.02 / 1000.0,  # -2 % per kHz
        p0=math.pi + 0.35,
        p1=-2 * math.pi * 15e-6,  # 15 us chain delay
        ref_model=model,
        f_min=0.75 * f_res,
        f_max=1.25 * f_res,
    )
    count = max(2, int(round(bank_per_decade * math.log10(bank_tau_max / bank_tau_min))) + 1)
    bank = log_uniform_bank(bank_tau_min, bank_tau_max, count, weight=lambda tau: tau**-bank_tilt)
    params = dict(
        base_model=model,
        true_cal=cal,
        v_l=v_l,
        c_q=3e12,
        eps_x=2e-6,
        d_l=damping_rise * model.alpha / strain_full,
        relaxators=bank,
        fast_fraction=0.5,
        eps_sat=1.2 * strain_full,
        monitor_ratio=monitor,
    )
    params.update(overrides)
    return PlantConfig(**params)


@dataclass(frozen=True)
class PlantState:
    t: float
    f_res_now: float
    alpha_now: float
    relaxator_states: np.ndarray
    last_phasor: complex  # rx velocity phasor relative to the carrier
    drive_f: float
    drive_a: float
    gen_phase: float = 0.0
    since_change: float = 0.0
    envelope_level: float = 1.0  # |phasor| / |steady phasor|

    def conditioning(self, cfg: PlantConfig) -> float:
        return float(cfg.weights @ self.relaxator_states)


def initial_state(cfg: PlantConfig, f=None) -> PlantState:
    """Fully relaxed sample at rest, generator parked at ``f`` (default f_res0)."""
    m = cfg.base_model
    return PlantState(
        t=0.0,
        f_res_now=m.f_res,
        alpha_now=m.alpha,
        relaxator_states=np.zeros(len(cfg.relaxators)),
        last_phasor=0j,
        drive_f=m.f_res if f is None else float(f),
        drive_a=0.0,
    )


def equilibrium_targets(eps, cfg: PlantConfig):
    """Equilibrium (df_res [Hz], dalpha [1/m]) at strain amplitude ``eps``."""
    if eps < 0:
        raise ValueError("strain amplitude must be non-negative")
    if eps <= cfg.eps_x:
        df = -cfg.c_q * eps * eps
    else:
        df = -(cfg.c_q * cfg.eps_x**2 + cfg.c_l * (eps - cfg.eps_x))
    return df, cfg.d_l * eps


def conditioning_target(eps, cfg: PlantConfig) -> float:
    """Normalized conditioning level the bank relaxes toward, in [0, 1]."""
    ref = equilibrium_targets(cfg.eps_sat, cfg)[0]
    if ref == 0.0:
        return 0.0
    return min(1.0, equilibrium_targets(eps, cfg)[0] / ref)


def resonance_state(eps, level, cfg: PlantConfig):
    """Instantaneous (f_res, alpha) for strain ``eps`` and bank level ``level``."""
    df_fast, da_fast = equilibrium_targets(eps, cfg)
    df_sat, da_sat = equilibrium_targets(cfg.eps_sat, cfg)
    slow = 1.0 - cfg.fast_fraction
    m = cfg.base_model
    f_res = m.f_res + cfg.fast_fraction * df_fast + slow * level * df_sat
    alpha = m.alpha + cfg.fast_fraction * da_fast + slow * level * da_sat
    return f_res, alpha


def transient_time(f_res, alpha, cfg: PlantConfig) -> float:
    """Envelope time constant Q / (pi f_res) with Q = pi n / (2 tanh(alpha L))."""
    m = cfg.base_model
    return m.mode_n / (2.0 * f_res * math.tanh(alpha * m.length))


def steady_phasor(f, A, f_res, alpha, cfg: PlantConfig) -> complex:
    """Steady rx phasor for drive (f, A) through the true signal chain."""
    if A == 0.0:
        return 0j
    m = cfg.base_model
    cal = cfg.true_cal
    d = math.pi * m.mode_n * (f - f_res) / f_res
    al = alpha * m.length
    amp = cal.gain(f) / math.sqrt(math.sinh(al) ** 2 + math.sin(d) ** 2)
    phase = cal.offset(f) - math.atan2(math.sin(d), math.tanh(al) * math.cos(d))
    return cfg.monitor_ratio * A * amp * complex(math.cos(phase), math.sin(phase))


def advance(state: PlantState, cfg: PlantConfig, drive, dt) -> PlantState:
    """Integrate the sample over ``dt`` seconds under constant drive ``(f, A)``.

    Sub-steps start at a quarter of the transient time after any drive change
    and grow with the time since that change, capped by ``cfg.max_substep``.
    Relaxators and the envelope are propagated with exact exponentials over
    each sub-step.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    f, A = float(drive[0]), float(drive[1])
    since = state.since_change
    if f != state.drive_f or A != state.drive_a:
        since = 0.0
    w, tau = cfg.weights, cfg.taus
    s = state.relaxator_states.copy()
    P = state.last_phasor
    t = state.t
    phase = state.gen_phase
    f_res, alpha = state.f_res_now, state.alpha_now
    P_ss = P
    remaining = float(dt)
    while remaining > 1e-15:
        tau_tr = transient_time(f_res, alpha, cfg)
        h = min(remaining, max(0.25 * tau_tr, 0.1 * since), cfg.max_substep)
        eps = abs(P) / cfg.v_l
        target = conditioning_target(eps, cfg)
        s = target + (s - target) * np.exp(-h / tau)
        np.clip(s, 0.0, 1.0, out=s)
        f_res, alpha = resonance_state(eps, float(w @ s), cfg)
        P_ss = steady_phasor(f, A, f_res, alpha, cfg)
        lam = complex(1.0 / transient_time(f_res, alpha, cfg), 2 * math.pi * (f - f_res))
        P = P_ss + (P - P_ss) * np.exp(-lam * h)
        phase = math.fmod(phase + 2 * math.pi * f * h, 2 * math.pi)
        t += h
        since += h
        remaining -= h
    # final parameters consistent with the final envelope
    f_res, alpha = resonance_state(abs(P) / cfg.v_l, float(w @ s), cfg)
    P_ss = steady_phasor(f, A, f_res, alpha, cfg)
    level = abs(P) / abs(P_ss) if P_ss != 0 else (1.0 if P == 0 else math.inf)
    return PlantState(
        t=t,
        f_res_now=f_res,
        alpha_now=alpha,
        relaxator_states=s,
        last_phasor=complex(P),
        drive_f=f,
        drive_a=A,
        gen_phase=phase,
        since_change=since,
        envelope_level=level,
    )


def synthesize_window(state: PlantState, cfg: PlantConfig, drive, duration, fs, rng_seed):
    """tx/rx waveforms for the next ``duration`` seconds; ``state`` is not modified.

    The envelope moves from ``state.last_phasor`` toward the steady phasor of
    the current resonance. Material parameters are frozen over the window.
    """
    f, A = float(drive[0]), float(drive[1])
    n = int(round(duration * fs))
    if n < 2:
        raise ValueError("window must hold at least two samples")
    if not fs > 2 * f:
        raise ValueError("sample rate must exceed twice the drive frequency")
    tau = np.arange(n) / fs
    P_ss = steady_phasor(f, A, state.f_res_now, state.alpha_now, cfg)
    lam = complex(
        1.0 / transient_time(state.f_res_now, state.alpha_now, cfg),
        2 * math.pi * (f - state.f_res_now),
    )
    carrier = np.exp(1j * (state.gen_phase + 2 * math.pi * f * tau))
    envelope = P_ss + (state.last_phasor - P_ss) * np.exp(-lam * tau)
    tx = cfg.monitor_ratio * A * carrier.real
    rx = (envelope * carrier).real
    if cfg.noise_rms > 0 and P_ss != 0:
        rng = np.random.default_rng(rng_seed)
        rx = rx + rng.normal(0.0, cfg.noise_rms * abs(P_ss), n)
    return (
        WaveformWindow(tx, fs, state.t),
        WaveformWindow(rx, fs, state.t),
    )


@dataclass
class VirtualSample:
    """Mutable wrapper pairing a config with its evolving state."""

    cfg: PlantConfig
    state: PlantState = None
    history: list = field(default_factory=list)
    keep_history: bool = False

    def __post_init__(self):
        if self.state is None:
            self.state = initial_state(self.cfg)

    @property
    def t(self) -> float:
        return self.state.t

    def advance(self, f, A, dt):
        if dt > 0:
            self.state = advance(self.state, self.cfg, (f, A), dt)
            if self.keep_history:
                self.history.append(self.state)
        return self.state

    def acquire(self, f, A, duration, fs, seed):
        """Record a window under drive (f, A), then advance through it."""
        if f != self.state.drive_f or A != self.state.drive_a:
            # the generator switches now; the envelope starts from here
            self.state = replace(self.state, drive_f=float(f), drive_a=float(A), since_change=0.0)
        tx, rx = synthesize_window(self.state, self.cfg, (f, A), duration, fs, seed)
        self.advance(f, A, duration)
        return tx, rx


def write_snapshots_csv(path, states, cfg: PlantConfig):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_s", "f_res_hz", "alpha_per_m", "conditioning_level"])
        for st in states:
            w.writerow(
                [repr(st.t), repr(st.f_res_now), repr(st.alpha_now), repr(st.conditioning(cfg))]
            )
