"""Experiment protocols run against the virtual sample.

* :func:`run_calibration` samples a low-amplitude resonance curve and fits the
  setup corrections.
* :func:`run_tracking_nrus` steps the drive amplitude up and back down,
  tracking the resonance at every step.
* :func:`run_sweep_nrus` is the conventional alternative: a full frequency
  sweep per amplitude, peak point inverted.
* :func:`run_cond_relax` monitors conditioning at high amplitude and the
  following recovery with back-to-back acquisitions.

Plus the indicators used to compare them: loop area, endpoint shifts,
detuning density and log-time fits.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import tracker as trk
from .dsp import WaveformWindow, tone_pair, velocity_to_strain
from .errors import NoDataError, ProtocolError, RestrackError, ZeroDriveError
from .modane import (
    CalibrationParams,
    Measurement,
    ResponsePoint,
    apply_calibration,
    fit_calibration,
    invert_response,
)
from .plant import PlantConfig, VirtualSample

log = logging.getLogger(__name__)

DEFAULT_FS = 5e6
# Transient must have decayed for this many time constants before a record.
SETTLE_FACTOR = 5.0


# --------------------------------------------------------------------------
# Schedules and results
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScheduleEntry:
    A: float
    dwell: float
    record_len: float
    pre_record_gap: float

    def __post_init__(self):
        if self.A < 0:
            raise ValueError("drive amplitude must be non-negative")
        if self.record_len <= 0 or self.pre_record_gap < 0:
            raise ValueError("record_len must be positive and pre_record_gap non-negative")
        if self.dwell < self.pre_record_gap + self.record_len - 1e-12:
            raise ValueError("dwell shorter than pre_record_gap + record_len")


@dataclass(frozen=True)
class AmplitudeSchedule:
    entries: tuple

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def amplitudes(self):
        return np.array([e.A for e in self.entries])

    @property
    def duration(self) -> float:
        return float(sum(e.dwell for e in self.entries))

    @classmethod
    def symmetric(cls, a_min=0.5, a_max=150.0, steps=60, dwell=0.015, record_len=0.005,
                  pre_record_gap=None):
        """Uniform loading ramp ``a_min -> a_max`` in ``steps`` steps, then back down.

        The record closes each dwell unless ``pre_record_gap`` says otherwise.
        """
        if pre_record_gap is None:
            pre_record_gap = dwell - record_len
        up = np.linspace(a_min, a_max, steps + 1) if steps > 0 else np.array([a_min])
        amps = np.concatenate([up, up[-2::-1]])
        return cls(tuple(ScheduleEntry(float(a), dwell, record_len, pre_record_gap) for a in amps))

    @classmethod
    def for_duration(cls, total, a_min=0.5, a_max=150.0, steps=60, record_len=0.005):
        """Same ramp with the dwell stretched so the run lasts ``total`` seconds."""
        n = 2 * steps + 1
        return cls.symmetric(a_min, a_max, steps, total / n, record_len)


@dataclass
class Branch:
    """One side of an indicator-vs-strain curve, ordered by drive amplitude."""

    A: np.ndarray
    strain: np.ndarray
    f_res: np.ndarray
    alpha: np.ndarray
    dfr: np.ndarray
    dalpha: np.ndarray


@dataclass
class NrusResult:
    records: list
    loading: Branch
    unloading: Branch
    f_res0: float
    alpha0: float
    duration: float

    def loop_area(self, indicator="dfr") -> float:
        lo, un = self.loading, self.unloading
        return metric_loop_area(
            (lo.strain, getattr(lo, indicator)), (un.strain, getattr(un, indicator))
        )


@dataclass
class SweepCurve:
    A: float
    branch: str
    f: np.ndarray
    a: np.ndarray
    delta_phi: np.ndarray
    strain: np.ndarray
    f_res: float
    alpha: float
    peak_strain: float
    flagged: bool


@dataclass
class SweepResult:
    curves: list
    loading: Branch
    unloading: Branch
    f_res0: float
    alpha0: float
    duration: float

    def loop_area(self, indicator="dfr") -> float:
        lo, un = self.loading, self.unloading
        return metric_loop_area(
            (lo.strain, getattr(lo, indicator)), (un.strain, getattr(un, indicator))
        )


@dataclass(frozen=True)
class Phase:
    name: str
    A: float
    duration: float


@dataclass
class CondRelaxResult:
    t: np.ndarray
    phase: np.ndarray
    A: np.ndarray
    f: np.ndarray
    delta_phi: np.ndarray
    f_res: np.ndarray
    alpha: np.ndarray
    strain: np.ndarray
    boundaries: list  # (name, t_start, t_end)
    records: list = field(repr=False, default_factory=list)

    def phase_series(self, name):
        """(time since phase start, f_res, alpha, delta_phi) for one phase."""
        for pname, t0, _ in self.boundaries:
            if pname == name:
                m = self.phase == name
                return self.t[m] - t0, self.f_res[m], self.alpha[m], self.delta_phi[m]
        raise KeyError(name)


# --------------------------------------------------------------------------
# Acquisition
# --------------------------------------------------------------------------


def measure(tx: WaveformWindow, rx: WaveformWindow, f, A, cal: CalibrationParams, v_l):
    """Transfer, calibration and strain for one recorded window pair."""
    t, r = tone_pair(tx, rx, f)
    if abs(t) <= 1e-12:
        raise ZeroDriveError("no drive signal at the analysis frequency")
    m = apply_calibration(r / t, f, cal)
    return replace(m, A=float(A), strain=velocity_to_strain(abs(r), v_l))


def _unsettled(gap, f_res, alpha, model):
    if not (np.isfinite(f_res) and np.isfinite(alpha)) or alpha <= 0:
        f_res, alpha = model.f_res, model.alpha
    tau = model.mode_n / (2 * f_res * math.tanh(alpha * model.length))
    return gap < SETTLE_FACTOR * tau


def _make_branches(A, strain, f_res, alpha):
    A, strain, f_res, alpha = (np.asarray(x, float) for x in (A, strain, f_res, alpha))
    peak = int(np.argmax(A))
    f0, a0 = f_res[0], alpha[0]

    def branch(idx):
        return Branch(
            A[idx], strain[idx], f_res[idx], alpha[idx],
            (f_res[idx] - f0) / f0, (alpha[idx] - a0) / a0,
        )

    load = np.arange(0, peak + 1)
    unload = np.arange(len(A) - 1, peak - 1, -1)
    return branch(load), branch(unload), f0, a0


def run_calibration(plant: VirtualSample, f_center, span=1600.0, step=8.0, A=1.0,
                    dwell=0.015, record_len=0.005, fs=DEFAULT_FS, seed=0,
                    length=None, mode_n=None, settle=0.05):
    """Low-amplitude sine sweep and calibration fit.

    Returns ``(CalibrationParams, f, z)``.
    """
    m = plant.cfg.base_model
    length = m.length if length is None else length
    mode_n = m.mode_n if mode_n is None else mode_n
    freqs = f_center - span / 2 + step * np.arange(int(round(span / step)) + 1)
    gap = dwell - record_len
    z = np.empty(len(freqs), complex)
    plant.advance(freqs[0], A, settle)
    for i, f in enumerate(freqs):
        plant.advance(f, A, gap)
        tx, rx = plant.acquire(f, A, record_len, fs, (seed, i))
        t, r = tone_pair(tx, rx, f)
        z[i] = r / t
    cal = fit_calibration(freqs, z, length, mode_n)
    return cal, freqs, z


def run_tracking_nrus(plant: VirtualSample, tracker_cfg: trk.TrackerConfig,
                      schedule: AmplitudeSchedule, cal: CalibrationParams,
                      fs=DEFAULT_FS, seed=0, f0=None) -> NrusResult:
    """Resonance-tracking NRUS: one tracked acquisition per amplitude step."""
    ref = cal.ref_model
    geom = ref.geometry
    v_l = plant.cfg.v_l
    f0 = ref.f_res if f0 is None else f0
    t_start = plant.t
    st = trk.initial_state(f0, schedule[0].A, tracker_cfg, ref)
    records = []
    for idx, entry in enumerate(schedule):
        f, A = st.f_i, entry.A
        try:
            plant.advance(f, A, entry.pre_record_gap)
            t_rec = plant.t
            tx, rx = plant.acquire(f, A, entry.record_len, fs, (seed, idx))
            plant.advance(f, A, entry.dwell - entry.pre_record_gap - entry.record_len)
            meas = measure(tx, rx, f, A, cal, v_l)
            next_A = schedule[idx + 1].A if idx + 1 < len(schedule) else A
            st, _, rec = trk.process_iteration(st, tracker_cfg, meas, geom, next_A)
        except RestrackError as exc:
            raise ProtocolError(idx, exc) from exc
        unsettled = _unsettled(entry.pre_record_gap, rec.f_res_est, rec.alpha_est, ref)
        records.append(replace(rec, t=t_rec, unsettled=unsettled))
    load, unload, fr0, a0 = _make_branches(
        [r.A_i for r in records], [r.strain for r in records],
        [r.f_res_est for r in records], [r.alpha_est for r in records],
    )
    return NrusResult(records, load, unload, fr0, a0, plant.t - t_start)


@dataclass(frozen=True)
class SweepConfig:
    f_start: float
    f_stop: float
    step: float = 5.0
    dwell: float = 0.015
    record_len: float = 0.005

    @property
    def frequencies(self):
        n = int(round((self.f_stop - self.f_start) / self.step)) + 1
        return self.f_start + self.step * np.arange(n)


def run_sweep_nrus(plant: VirtualSample, sweep: SweepConfig, amplitudes,
                   cal: CalibrationParams, fs=DEFAULT_FS, seed=0) -> SweepResult:
    """Conventional NRUS: a full monochromatic sweep at every amplitude.

    The strongest point of each curve is inverted for ``(f_res, alpha)``. A
    curve whose maximum sits on a sweep edge is flagged but kept.
    """
    ref = cal.ref_model
    geom = ref.geometry
    v_l = plant.cfg.v_l
    freqs = sweep.frequencies
    gap = sweep.dwell - sweep.record_len
    amplitudes = np.asarray(amplitudes, float)
    peak_idx = int(np.argmax(amplitudes))
    t_start = plant.t
    curves = []
    counter = 0
    for j, A in enumerate(amplitudes):
        meas = []
        for f in freqs:
            try:
                plant.advance(f, A, gap)
                tx, rx = plant.acquire(f, A, sweep.record_len, fs, (seed, counter))
                meas.append(measure(tx, rx, f, A, cal, v_l))
            except RestrackError as exc:
                raise ProtocolError(counter, exc) from exc
            counter += 1
        a = np.array([m.a for m in meas])
        k = int(np.argmax(a))
        flagged = k == 0 or k == len(freqs) - 1
        best = meas[k]
        try:
            est = invert_response(ResponsePoint(best.a, best.phi), best.f, geom)
            f_res, alpha = est.f_res_est, est.alpha_est
        except RestrackError:
            f_res, alpha, flagged = math.nan, math.nan, True
        if flagged:
            log.warning("sweep at A=%.3g V: resonance not bracketed", A)
        curves.append(SweepCurve(
            float(A), "loading" if j <= peak_idx else "unloading", freqs.copy(), a,
            np.array([m.delta_phi for m in meas]), np.array([m.strain for m in meas]),
            f_res, alpha, best.strain, flagged,
        ))
    load, unload, fr0, a0 = _make_branches(
        [c.A for c in curves], [c.peak_strain for c in curves],
        [c.f_res for c in curves], [c.alpha for c in curves],
    )
    return SweepResult(curves, load, unload, fr0, a0, plant.t - t_start)


def run_cond_relax(plant: VirtualSample, tracker_cfg: trk.TrackerConfig, phases,
                   cal: CalibrationParams, fs=DEFAULT_FS, record_len=0.005, seed=0,
                   gap_fraction=0.0, max_gap=0.0, f0=None) -> CondRelaxResult:
    """Conditioning/relaxation monitoring with back-to-back acquisitions.

    ``phases`` is a sequence of :class:`Phase` (typically precondition,
    conditioning, relaxation). Every downward amplitude transition freezes the
    tracker for ``tracker_cfg.inhibition_iters`` iterations, and the amplitude
    coefficient is forgotten at every phase boundary so the step into the next
    phase is taken on feedback alone.

    With ``gap_fraction > 0`` the pause between acquisitions grows to
    ``gap_fraction`` times the time elapsed in the phase (at most ``max_gap``),
    which keeps hour-long relaxations tractable; ``0`` is back-to-back.
    """
    phases = [p if isinstance(p, Phase) else Phase(*p) for p in phases]
    ref = cal.ref_model
    geom = ref.geometry
    v_l = plant.cfg.v_l
    st = trk.initial_state(ref.f_res if f0 is None else f0, phases[0].A, tracker_cfg, ref)
    rows = []
    records = []
    boundaries = []
    idx = 0
    t_change = plant.t
    for p_i, ph in enumerate(phases):
        t0 = plant.t
        if p_i > 0 and ph.A != phases[p_i - 1].A:
            t_change = t0
        while True:
            elapsed = plant.t - t0
            if elapsed + record_len > ph.duration + 1e-9:
                break
            f, A = st.f_i, ph.A
            try:
                t_rec = plant.t
                tx, rx = plant.acquire(f, A, record_len, fs, (seed, idx))
                meas = measure(tx, rx, f, A, cal, v_l)
                elapsed = plant.t - t0
                spare = ph.duration - elapsed - record_len  # room left for a gap
                last = spare < -1e-9
                gap = min(max_gap, gap_fraction * elapsed, max(spare, 0.0)) if gap_fraction > 0 else 0.0
                next_A = phases[p_i + 1].A if last and p_i + 1 < len(phases) else A
                if last and p_i + 1 < len(phases):
                    st = replace(st, l_i=None)  # feedforward is unknown across a phase boundary
                st, _, rec = trk.process_iteration(st, tracker_cfg, meas, geom, next_A)
                if next_A < A:
                    st = trk.inhibit(st, tracker_cfg.inhibition_iters)
                if gap > 0 and not last:
                    plant.advance(st.f_i, A, gap)
            except RestrackError as exc:
                raise ProtocolError(idx, exc) from exc
            rec = replace(rec, t=t_rec,
                          unsettled=_unsettled(t_rec - t_change, rec.f_res_est, rec.alpha_est, ref))
            records.append(rec)
            rows.append((t_rec, ph.name, A, f, rec.delta_phi_i, rec.f_res_est,
                         rec.alpha_est, rec.strain))
            idx += 1
        boundaries.append((ph.name, t0, plant.t))
    cols = list(zip(*rows)) if rows else [[]] * 8
    return CondRelaxResult(
        t=np.array(cols[0], float), phase=np.array(cols[1], dtype=object),
        A=np.array(cols[2], float), f=np.array(cols[3], float),
        delta_phi=np.array(cols[4], float), f_res=np.array(cols[5], float),
        alpha=np.array(cols[6], float), strain=np.array(cols[7], float),
        boundaries=boundaries, records=records,
    )


# --------------------------------------------------------------------------
# Batch studies
# --------------------------------------------------------------------------


def _tracking_task(args):
    plant_cfg, tracker_cfg, schedule, cal, fs, seed = args
    return run_tracking_nrus(VirtualSample(plant_cfg), tracker_cfg, schedule, cal, fs, seed)


def _map(fn, tasks, workers):
    if workers and workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


def run_duration_study(plant_cfg: PlantConfig, tracker_cfg, durations, cal, fs=DEFAULT_FS,
                       seed=0, steps=60, a_min=0.5, a_max=150.0, record_len=0.005,
                       workers=1):
    """Tracking NRUS repeated at several total durations, each on a fresh sample."""
    tasks = [
        (plant_cfg, tracker_cfg,
         AmplitudeSchedule.for_duration(T, a_min, a_max, steps, record_len), cal, fs, seed)
        for T in durations
    ]
    return dict(zip(durations, _map(_tracking_task, tasks, workers)))


def run_mode_ablation(plant_cfg: PlantConfig, tracker_cfg, schedule, cal, fs=DEFAULT_FS,
                      seed=0, modes=trk.MODES, workers=1):
    """Same experiment with each tracker feature set, each on a fresh sample."""
    tasks = [(plant_cfg, replace(tracker_cfg, mode=m), schedule, cal, fs, seed) for m in modes]
    return dict(zip(modes, _map(_tracking_task, tasks, workers)))


# --------------------------------------------------------------------------
# Indicators
# --------------------------------------------------------------------------


def metric_loop_area(loading, unloading) -> float:
    """Area enclosed by the loading curve and the unloading curve.

    Both branches are ``(x, y)`` pairs in ascending drive order; the polygon
    is loading followed by unloading reversed.
    """
    xl, yl = (np.asarray(v, float) for v in loading)
    xu, yu = (np.asarray(v, float) for v in unloading)
    x = np.concatenate([xl, xu[::-1]])
    y = np.concatenate([yl, yu[::-1]])
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if len(x) < 3:
        warnings.warn("fewer than 3 vertices; loop area is zero", stacklevel=2)
        return 0.0
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def metric_endpoint(result):
    """Relative (df_res, dalpha) on the loading branch at the highest amplitude."""
    lo = result.loading
    k = int(np.argmax(lo.A))
    return float(lo.dfr[k]), float(lo.dalpha[k])


def metric_detuning_kde(samples, bandwidth, points_per_bandwidth=20):
    """Gaussian kernel density of frequency deviations on a uniform grid.

    The grid spans the samples plus three bandwidths either side.
    Returns ``(grid, density)``.
    """
    x = np.asarray(samples, float)
    x = x[np.isfinite(x)]
    if len(x) < 2:
        raise ValueError("need at least two samples")
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    lo, hi = x.min() - 3 * bandwidth, x.max() + 3 * bandwidth
    n = int(math.ceil((hi - lo) / bandwidth * points_per_bandwidth)) + 1
    n += 1 - n % 2  # odd, so a symmetric sample set has a grid point at its centre
    grid = np.linspace(lo, hi, n)
    z = (grid[:, None] - x[None, :]) / bandwidth
    dens = np.exp(-0.5 * z**2).sum(axis=1) / (len(x) * bandwidth * math.sqrt(2 * math.pi))
    return grid, dens


@dataclass(frozen=True)
class LogTimeFit:
    slope: float  # per decade
    intercept: float
    r2: float


def fit_logtime(t, y, window) -> LogTimeFit:
    """Least-squares line of ``y`` against ``log10 t`` inside ``window``."""
    t = np.asarray(t, float)
    y = np.asarray(y, float)
    lo, hi = window
    m = (t >= lo) & (t <= hi) & np.isfinite(y) & (t > 0)
    if not m.any():
        raise NoDataError(f"no samples in window [{lo}, {hi}]")
    if m.sum() < 10:
        raise NoDataError(f"only {int(m.sum())} samples in window; need 10")
    x = np.log10(t[m])
    yy = y[m]
    A = np.column_stack([x, np.ones_like(x)])
    (slope, intercept), *_ = np.linalg.lstsq(A, yy, rcond=None)
    resid = yy - (slope * x + intercept)
    ss_tot = float(np.sum((yy - yy.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LogTimeFit(float(slope), float(intercept), r2)


# --------------------------------------------------------------------------
# CSV export
# --------------------------------------------------------------------------


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_branches_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["branch", "a_v", "strain", "f_res_hz", "alpha_per_m", "dfr_rel", "dalpha_rel"])
        for name, br in (("loading", result.loading), ("unloading", result.unloading)):
            for row in zip(br.A, br.strain, br.f_res, br.alpha, br.dfr, br.dalpha):
                w.writerow([name] + [repr(float(v)) for v in row])


def write_timeseries_csv(path, result: CondRelaxResult):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["t_s", "phase", "a_v", "f_hz", "delta_phi_rad", "f_res_hz",
                    "alpha_per_m", "strain"])
        for i in range(len(result.t)):
            w.writerow([
                repr(float(result.t[i])), result.phase[i], repr(float(result.A[i])),
                repr(float(result.f[i])), repr(float(result.delta_phi[i])),
                repr(float(result.f_res[i])), repr(float(result.alpha[i])),
                repr(float(result.strain[i])),
            ])


def write_metrics_csv(path, metrics: dict):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["key", "value"])
        for k, v in metrics.items():
            w.writerow([k, repr(float(v)) if isinstance(v, (float, np.floating)) else v])


def write_sweep_curves_csv(path, result: SweepResult):
    with open(path, "w", newline="") as fh:
        w = _writer(fh)
        w.writerow(["a_v", "branch", "f_hz", "a", "delta_phi_rad", "strain", "flagged"])
        for c in result.curves:
            for i in range(len(c.f)):
                w.writerow([repr(c.A), c.branch, repr(float(c.f[i])), repr(float(c.a[i])),
                            repr(float(c.delta_phi[i])), repr(float(c.strain[i])),
                            int(c.flagged)])
