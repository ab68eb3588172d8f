import math
import warnings

import numpy as np
import pytest

from restrack import plant as pl
from restrack import protocols as pr
from restrack import tracker as trk
from restrack.errors import NoDataError
from restrack.modane import wrap_phase


@pytest.fixture(scope="module")
def cfg():
    return pl.default_plant_config()


def short_schedule(steps=10, dwell=0.015):
    return pr.AmplitudeSchedule.symmetric(0.5, 150.0, steps, dwell, 0.005)


def test_default_schedule():
    s = pr.AmplitudeSchedule.symmetric()
    a = s.amplitudes
    assert len(s) == 121
    assert a[0] == 0.5 and a[60] == 150.0 and a[-1] == 0.5
    assert np.allclose(np.diff(a[:61]), 149.5 / 60)
    assert s[0].pre_record_gap == pytest.approx(0.010)
    assert s.duration == pytest.approx(121 * 0.015)
    assert pr.AmplitudeSchedule.for_duration(120.0).duration == pytest.approx(120.0)


def test_schedule_entry_validation():
    with pytest.raises(ValueError):
        pr.ScheduleEntry(1.0, 0.004, 0.005, 0.0)
    with pytest.raises(ValueError):
        pr.ScheduleEntry(-1.0, 0.015, 0.005, 0.01)


def test_loop_area_unit_square():
    load = ([0, 1, 1], [0, 0, 1])
    unload = ([0, 0, 1], [0, 1, 1])
    assert pr.metric_loop_area(load, unload) == pytest.approx(1.0)


def test_loop_area_degenerate_warns():
    with pytest.warns(UserWarning):
        assert pr.metric_loop_area(([0], [0]), ([1], [1])) == 0.0


def test_kde_normalized_and_spike():
    x = np.random.default_rng(1).normal(3.0, 2.0, 500)
    g, d = pr.metric_detuning_kde(x, 0.4)
    assert np.trapezoid(d, g) == pytest.approx(1.0, abs=1e-3)
    assert g[0] == pytest.approx(x.min() - 1.2) and g[-1] == pytest.approx(x.max() + 1.2)
    g, d = pr.metric_detuning_kde([0.0, 0.0], 0.1)
    assert g[np.argmax(d)] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        pr.metric_detuning_kde([1.0], 0.1)
    with pytest.raises(ValueError):
        pr.metric_detuning_kde([1.0, 2.0], 0.0)


def test_kde_mode_monte_carlo():
    # averaged over trials, the mode of N(0, 1) samples sits within 1/sqrt(N) of 0
    n, modes = 400, []
    for seed in range(100):
        x = np.random.default_rng(seed).normal(0.0, 1.0, n)
        g, d = pr.metric_detuning_kde(x, 1.06 * n**-0.2)
        modes.append(g[np.argmax(d)])
    assert abs(np.mean(modes)) < 1 / math.sqrt(n)


def test_fit_logtime():
    t = np.logspace(-1, 3, 50)
    fit = pr.fit_logtime(t, 3 * np.log10(t), (0.1, 1000))
    assert fit.slope == pytest.approx(3.0)
    assert fit.r2 == pytest.approx(1.0)
    fit = pr.fit_logtime(t, np.full_like(t, 2.0), (1, 100))
    assert fit.slope == pytest.approx(0.0, abs=1e-12) and fit.r2 == 1.0
    with pytest.raises(NoDataError):
        pr.fit_logtime(t, t, (2000, 3000))
    with pytest.raises(NoDataError):
        pr.fit_logtime(t, t, (1, 2))


def test_calibration_on_plant(cfg):
    cal, f, z = pr.run_calibration(pl.VirtualSample(cfg), 8500.0)
    true = cfg.true_cal
    assert len(f) == 201 and f[0] == 7700.0 and f[-1] == 9300.0
    assert cal.ref_model.f_res == pytest.approx(true.ref_model.f_res, abs=0.5)
    assert cal.ref_model.alpha_l == pytest.approx(true.ref_model.alpha_l, rel=0.02)
    assert cal.q0 == pytest.approx(true.q0, rel=0.02)
    assert abs(wrap_phase(cal.p0 - true.p0)) < 0.02
    assert cal.p1 == pytest.approx(true.p1, rel=0.02)


def test_zero_nonlinearity_endpoint():
    lin = pl.default_plant_config(c_q=0.0, d_l=0.0)
    res = pr.run_tracking_nrus(pl.VirtualSample(lin), trk.TrackerConfig(), short_schedule(), lin.true_cal)
    dfr, dal = pr.metric_endpoint(res)
    # what is left is unwindowed-DFT leakage in the measurement, not the metric
    assert abs(dfr) < 1e-6 and abs(dal) < 5e-3


def test_single_point_schedule_endpoint(cfg):
    sched = pr.AmplitudeSchedule((pr.ScheduleEntry(100.0, 0.015, 0.005, 0.01),))
    res = pr.run_tracking_nrus(pl.VirtualSample(cfg), trk.TrackerConfig(), sched, cfg.true_cal)
    assert pr.metric_endpoint(res) == (0.0, 0.0)


def test_tracking_branches_and_determinism(cfg):
    noisy = pl.default_plant_config(noise_rms=0.01)
    runs = [
        pr.run_tracking_nrus(pl.VirtualSample(noisy), trk.TrackerConfig(), short_schedule(), noisy.true_cal, seed=4)
        for _ in range(2)
    ]
    a, b = runs
    assert a.records == b.records
    assert len(a.loading.A) == 11 and len(a.unloading.A) == 11
    assert a.loading.A[-1] == a.unloading.A[-1] == 150.0
    assert np.all(np.diff(a.unloading.A) > 0)
    assert a.loading.dfr[0] == 0.0
    assert a.loading.dfr[-1] < -0.003
    other = pr.run_tracking_nrus(pl.VirtualSample(noisy), trk.TrackerConfig(), short_schedule(), noisy.true_cal, seed=5)
    assert other.records != a.records


def test_quasi_stationarity_gate(cfg):
    tight = pr.AmplitudeSchedule.symmetric(0.5, 150.0, 5, 0.008, 0.005)
    res = pr.run_tracking_nrus(pl.VirtualSample(cfg), trk.TrackerConfig(), tight, cfg.true_cal)
    assert all(r.unsettled for r in res.records)
    res = pr.run_tracking_nrus(pl.VirtualSample(cfg), trk.TrackerConfig(), short_schedule(60), cfg.true_cal)
    assert not any(r.unsettled for r in res.records)


def test_sweep_flags_unbracketed(cfg):
    sweep = pr.SweepConfig(8550.0, 8700.0, 10.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = pr.run_sweep_nrus(pl.VirtualSample(cfg), sweep, [1.0, 150.0, 1.0], cfg.true_cal)
    assert all(c.flagged for c in res.curves)
    assert len(res.curves) == 3 and len(res.curves[0].f) == 16


def test_cond_relax_structure(cfg):
    phases = [pr.Phase("pre", 1.0, 0.1), pr.Phase("cond", 100.0, 0.2), pr.Phase("relax", 1.0, 0.2)]
    res = pr.run_cond_relax(pl.VirtualSample(cfg), trk.TrackerConfig(), phases, cfg.true_cal)
    names = [b[0] for b in res.boundaries]
    assert names == ["pre", "cond", "relax"]
    relax = res.phase == "relax"
    first = np.argmax(relax)
    # two inhibited iterations straddle the amplitude drop
    assert res.records[first - 1].inhibited is False
    assert res.records[first].inhibited and res.records[first + 1].inhibited
    assert not res.records[first + 2].inhibited
    assert res.records[first].unsettled
    # the amplitude coefficient is unknown at each boundary and relearned from the jump
    cond = int(np.argmax(res.phase == "cond"))
    assert math.isnan(res.records[cond - 1].l_i)
    assert math.isfinite(res.records[cond].l_i)
    assert math.isnan(res.records[first - 1].l_i)
    assert np.allclose(np.diff(res.t), 0.005)
    assert res.boundaries[1][1] == pytest.approx(0.1, abs=1e-9)


def test_cond_relax_growing_gaps(cfg):
    phases = [pr.Phase("cond", 150.0, 1.0), pr.Phase("relax", 1.0, 20.0)]
    res = pr.run_cond_relax(pl.VirtualSample(cfg), trk.TrackerConfig(), phases, cfg.true_cal,
                            gap_fraction=0.1, max_gap=2.0)
    t, f, _, _ = res.phase_series("relax")
    gaps = np.diff(t)
    assert gaps.max() <= 2.0 + 0.005 + 1e-9
    assert gaps[-2] > gaps[5]
    ok = np.isfinite(f)
    assert f[ok][-1] > f[ok][3]  # recovering


def test_csv_writers(tmp_path, cfg):
    res = pr.run_tracking_nrus(pl.VirtualSample(cfg), trk.TrackerConfig(), short_schedule(3), cfg.true_cal)
    pr.write_branches_csv(tmp_path / "b.csv", res)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "branch,a_v,strain,f_res_hz,alpha_per_m,dfr_rel,dalpha_rel"
    assert len(lines) == 1 + 4 + 4
    pr.write_metrics_csv(tmp_path / "m.csv", {"a": 1.5, "b": 3})
    assert (tmp_path / "m.csv").read_text() == "key,value\na,1.5\nb,3\n"
