import math
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from restrack import tracker as trk
from restrack.modane import (
    CalibrationParams,
    Measurement,
    ModaneParams,
    apply_calibration,
    forward_transfer,
    phase_slope,
)

L = 0.14


def measure(f, model, cal, A=1.0):
    m = apply_calibration(forward_transfer(f, model, cal), f, cal)
    return replace(m, A=A, strain=0.0)


def ident(model):
    return CalibrationParams.identity(model)


def test_config_validation():
    with pytest.raises(ValueError, match="beta"):
        trk.TrackerConfig(beta=1.5)
    with pytest.raises(ValueError, match="mode"):
        trk.TrackerConfig(mode="bogus")
    with pytest.raises(ValueError, match="inhibition_iters"):
        trk.TrackerConfig(inhibition_iters=-1)
    with pytest.raises(ValueError, match="k_init"):
        trk.TrackerConfig(k_init=0.1)


def test_next_frequency_terms():
    assert trk.next_frequency(8500, 0.1, -0.01, -2.0, 5.0, "off") == 8500
    assert trk.next_frequency(8500, 0.1, -0.01, -2.0, 5.0, "fixed_k") == pytest.approx(8510)
    # softening (l < 0) and a rising amplitude: move down ahead of the resonance
    assert trk.next_frequency(8500, 0.0, -0.01, -2.0, 5.0, "full") == pytest.approx(8490)
    assert trk.next_frequency(8500, 0.0, -0.01, -2.0, 5.0, "full", True) == pytest.approx(8510)
    assert trk.next_frequency(8500, 0.0, -0.01, None, 5.0, "full") == 8500


def test_ema_updates():
    assert trk.update_amp_coeff(None, 8490, 8500, 10, 10, 0.5) is None
    assert trk.update_amp_coeff(None, 8490, 8500, 15, 10, 0.5) == pytest.approx(-2.0)
    assert trk.update_amp_coeff(-2.0, 8496, 8500, 15, 10, 0.5) == pytest.approx(-1.4)
    assert trk.update_amp_coeff(-2.0, 8496, None, 15, None, 0.5) == -2.0
    k = phase_slope(8500, 0.2, L)
    assert trk.update_phase_slope(None, 8500, 0.2, L, 0.5) == k
    assert trk.update_phase_slope(2 * k, 8500, 0.2, L, 0.25) == pytest.approx(1.75 * k)


@settings(max_examples=40, deadline=None)
@given(
    st.floats(5e3, 2e4),
    st.floats(0.005, 0.3),
    st.floats(-0.004, 0.004),
    st.sampled_from(["fixed_k", "adaptive_k", "full"]),
)
def test_converges_on_static_resonance(f_res, al, rel, mode):
    model = ModaneParams(f_res, al / L, L)
    cal = ident(model)
    cfg = trk.TrackerConfig(mode=mode)
    state = trk.initial_state(f_res * (1 + rel), 1.0, cfg, model)
    for _ in range(6):
        meas = measure(state.f_i, model, cal)
        state, _, rec = trk.process_iteration(state, cfg, meas, model.geometry, 1.0)
    assert abs(rec.delta_phi_i) < 1e-6
    assert rec.f_res_est == pytest.approx(f_res, rel=1e-9)


def test_feedforward_learns_linear_shift():
    # resonance moves -0.5 Hz per volt; after two steps the prediction is exact
    base = ModaneParams(8500.0, 0.03 / L, L)
    cal = ident(base)
    cfg = trk.TrackerConfig(mode="full", beta_prime=1.0)
    amps = [10.0, 20.0, 30.0, 40.0, 50.0]
    state = trk.initial_state(8500.0 - 5.0, amps[0], cfg, base)
    recs = []
    for i, A in enumerate(amps):
        model = ModaneParams(8500.0 - 0.5 * A, base.alpha, L)
        nxt = amps[i + 1] if i + 1 < len(amps) else A
        state, _, rec = trk.process_iteration(state, cfg, measure(state.f_i, model, cal, A), base.geometry, nxt)
        recs.append(rec)
    assert math.isnan(recs[0].l_i)
    assert recs[2].l_i == pytest.approx(-0.5, rel=1e-9)
    assert abs(recs[-1].delta_phi_i) < 1e-6


def test_inhibition_freezes_everything():
    model = ModaneParams(8500.0, 0.03 / L, L)
    cal = ident(model)
    cfg = trk.TrackerConfig(inhibition_iters=2)
    state = trk.initial_state(8495.0, 1.0, cfg, model)
    state = trk.inhibit(state, cfg.inhibition_iters)
    k0 = state.k_i
    for _ in range(2):
        state, f_next, rec = trk.process_iteration(state, cfg, measure(state.f_i, model, cal), model.geometry, 1.0)
        assert rec.inhibited and not rec.valid
        assert math.isnan(rec.f_res_est)
        assert f_next == 8495.0 and state.k_i == k0
    state, f_next, rec = trk.process_iteration(state, cfg, measure(state.f_i, model, cal), model.geometry, 1.0)
    assert rec.valid and f_next != 8495.0


def test_inconsistent_measurement_holds_frequency():
    model = ModaneParams(8500.0, 0.03 / L, L)
    cfg = trk.TrackerConfig()
    state = trk.initial_state(8500.0, 1.0, cfg, model)
    meas = Measurement(8500.0, 1.0, math.pi + 2.0, 2.0, 1.0)
    state2, f_next, rec = trk.process_iteration(state, cfg, meas, model.geometry, 1.0)
    assert rec.inconsistent and f_next == 8500.0
    assert state2.k_i == state.k_i and state2.i == 1


def test_iterations_csv(tmp_path):
    rec = trk.IterationRecord(0, 8500.0, 1.0, 2.0, 0.01, 8499.0, 0.2, -0.1, float("nan"), 1e-7, t=0.01)
    trk.write_iterations_csv(tmp_path / "it.csv", [rec])
    lines = (tmp_path / "it.csv").read_text().splitlines()
    assert lines[0].split(",") == list(trk.ITERATION_COLUMNS)
    assert lines[1].split(",")[2] == "8500.0"
