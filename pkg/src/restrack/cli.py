"""``restrack run <config>``: execute one configured protocol and export CSVs.

Each run writes ``<out>/<protocol>/<timestamp>/`` holding ``manifest.yaml``
(resolved config, seed, version, timestamps, file list) and the protocol's
CSV set. Exit codes: 0 success, 1 config error, 2 protocol error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import protocols as pr
from .config import RunConfig, load_yaml, parse_config, to_dict
from .errors import ConfigError, RestrackError
from .modane import write_params, write_sweep_csv
from .plant import VirtualSample
from .tracker import write_iterations_csv

log = logging.getLogger("restrack")

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_IO = 0, 1, 2, 3


def _now():
    return _dt.datetime.now(_dt.timezone.utc)


def _calibrate(cfg: RunConfig, plant_cfg, sec):
    """Calibration used by tracking protocols, plus CSV side outputs."""
    if sec.calibration == "true":
        return plant_cfg.true_cal, None
    plant = VirtualSample(plant_cfg)
    cal, f, z = pr.run_calibration(
        plant, plant_cfg.base_model.f_res, fs=sec.sample_rate, seed=cfg.seed + 1_000_003
    )
    return cal, (f, z)


def _schedule(sec, dwell=None):
    return pr.AmplitudeSchedule.symmetric(
        sec.a_min, sec.a_max, sec.steps, sec.dwell if dwell is None else dwell, sec.record_len
    )


def _nrus_metrics(res):
    dfr, dal = pr.metric_endpoint(res)
    return {
        "loop_area_dfr": res.loop_area("dfr"),
        "loop_area_dalpha": res.loop_area("dalpha"),
        "dfr_max": dfr,
        "dalpha_max": dal,
        "f_res0_hz": res.f_res0,
        "alpha0_per_m": res.alpha0,
        "duration_s": res.duration,
    }


def _write_cal(out: Path, cal, sweep):
    files = []
    if sweep is not None:
        write_sweep_csv(out / "calibration_sweep.csv", *sweep)
        write_params(out / "calibration.params", cal)
        files += ["calibration_sweep.csv", "calibration.params"]
    return files


def _detuning(records):
    return np.array([r.f_i - r.f_res_est for r in records if r.valid and math.isfinite(r.f_res_est)])


def run_protocol(cfg: RunConfig, out: Path):
    """Run the configured protocol and write its CSVs into ``out``.

    Returns the list of written file names (relative to ``out``).
    """
    plant_cfg = cfg.plant.build()
    tracker_cfg = cfg.tracker.build()
    sec = cfg.protocol
    name = cfg.protocol_name
    files = []

    if name == "calibrate":
        plant = VirtualSample(plant_cfg)
        cal, f, z = pr.run_calibration(
            plant, plant_cfg.base_model.f_res, sec.span, sec.step, sec.amplitude,
            sec.dwell, sec.record_len, sec.sample_rate, cfg.seed,
        )
        write_sweep_csv(out / "sweep.csv", f, z)
        write_params(out / "calibration.params", cal)
        true = plant_cfg.true_cal
        metrics = {"residual_rms": cal.residual_rms}
        for key in ("q0", "q1", "p0", "p1"):
            metrics[f"{key}_fit"] = getattr(cal, key)
            metrics[f"{key}_true"] = getattr(true, key)
        metrics["f_res_fit_hz"] = cal.ref_model.f_res
        metrics["f_res_true_hz"] = true.ref_model.f_res
        metrics["alpha_fit_per_m"] = cal.ref_model.alpha
        metrics["alpha_true_per_m"] = true.ref_model.alpha
        pr.write_metrics_csv(out / "metrics.csv", metrics)
        return files + ["sweep.csv", "calibration.params", "metrics.csv"]

    cal, sweep = _calibrate(cfg, plant_cfg, sec)
    files += _write_cal(out, cal, sweep)

    if name == "track_nrus":
        res = pr.run_tracking_nrus(
            VirtualSample(plant_cfg), tracker_cfg, _schedule(sec), cal, sec.sample_rate, cfg.seed
        )
        write_iterations_csv(out / "iterations.csv", res.records)
        pr.write_branches_csv(out / "branches.csv", res)
        m = _nrus_metrics(res)
        m["unsettled_records"] = sum(r.unsettled for r in res.records)
        pr.write_metrics_csv(out / "metrics.csv", m)
        files += ["iterations.csv", "branches.csv", "metrics.csv"]

    elif name == "sweep_nrus":
        f0 = plant_cfg.base_model.f_res
        sweep_cfg = pr.SweepConfig(f0 - sec.f_below, f0 + sec.f_above, sec.f_step,
                                   sec.dwell, sec.record_len)
        amps = _schedule(sec).amplitudes
        res = pr.run_sweep_nrus(VirtualSample(plant_cfg), sweep_cfg, amps, cal,
                                sec.sample_rate, cfg.seed)
        pr.write_sweep_curves_csv(out / "sweep_curves.csv", res)
        pr.write_branches_csv(out / "branches.csv", res)
        m = _nrus_metrics(res)
        m["flagged_curves"] = sum(c.flagged for c in res.curves)
        pr.write_metrics_csv(out / "metrics.csv", m)
        files += ["sweep_curves.csv", "branches.csv", "metrics.csv"]

    elif name == "cond_relax":
        phases = [
            pr.Phase("precondition", sec.a_low, sec.pre_duration),
            pr.Phase("conditioning", sec.a_cond, sec.cond_duration),
            pr.Phase("relaxation", sec.a_low, sec.relax_duration),
        ]
        res = pr.run_cond_relax(
            VirtualSample(plant_cfg), tracker_cfg, phases, cal, sec.sample_rate,
            sec.record_len, cfg.seed, sec.gap_fraction, sec.max_gap,
        )
        write_iterations_csv(out / "iterations.csv", res.records)
        pr.write_timeseries_csv(out / "timeseries.csv", res)
        m = {"iterations": len(res.t)}
        t, f, a, _ = res.phase_series("relaxation")
        lo, hi = plant_cfg.log_linear_window(sec.cond_duration)
        try:
            fit_f = pr.fit_logtime(t, f, (lo, hi))
            fit_a = pr.fit_logtime(t, a, (lo, hi))
            m.update({
                "relax_window_lo_s": lo, "relax_window_hi_s": hi,
                "relax_f_slope_hz_per_decade": fit_f.slope, "relax_f_r2": fit_f.r2,
                "relax_alpha_slope_per_decade": fit_a.slope, "relax_alpha_r2": fit_a.r2,
            })
        except RestrackError as exc:
            log.warning("relaxation fit skipped: %s", exc)
        pr.write_metrics_csv(out / "metrics.csv", m)
        files += ["iterations.csv", "timeseries.csv", "metrics.csv"]

    elif name == "duration_study":
        results = pr.run_duration_study(
            plant_cfg, tracker_cfg, sec.durations, cal, sec.sample_rate, cfg.seed,
            sec.steps, sec.a_min, sec.a_max, sec.record_len, sec.workers,
        )
        m = {}
        for T, res in results.items():
            sub = f"T_{T:g}s"
            (out / sub).mkdir()
            write_iterations_csv(out / sub / "iterations.csv", res.records)
            pr.write_branches_csv(out / sub / "branches.csv", res)
            files += [f"{sub}/iterations.csv", f"{sub}/branches.csv"]
            for k, v in _nrus_metrics(res).items():
                m[f"{sub}.{k}"] = v
        pr.write_metrics_csv(out / "metrics.csv", m)
        files.append("metrics.csv")

    elif name == "mode_ablation":
        results = pr.run_mode_ablation(
            plant_cfg, tracker_cfg, _schedule(sec), cal, sec.sample_rate, cfg.seed,
            sec.modes, sec.workers,
        )
        m = {}
        kde_rows = []
        for mode, res in results.items():
            (out / mode).mkdir()
            write_iterations_csv(out / mode / "iterations.csv", res.records)
            files.append(f"{mode}/iterations.csv")
            dphi = np.array([r.delta_phi_i for r in res.records if r.valid])
            df = _detuning(res.records)
            m[f"{mode}.max_abs_delta_phi"] = float(np.max(np.abs(dphi)))
            m[f"{mode}.detuning_iqr_hz"] = float(np.subtract(*np.percentile(df, [75, 25])))
            grid, dens = pr.metric_detuning_kde(df, sec.kde_bandwidth)
            kde_rows += [(mode, g, d) for g, d in zip(grid, dens)]
        with open(out / "kde.csv", "w", newline="") as fh:
            fh.write("mode,df_hz,density\n")
            for mode, g, d in kde_rows:
                fh.write(f"{mode},{float(g)!r},{float(d)!r}\n")
        pr.write_metrics_csv(out / "metrics.csv", m)
        files += ["kde.csv", "metrics.csv"]

    return files


def execute(cfg: RunConfig, quiet=False) -> int:
    """Run ``cfg`` and write its artifacts; returns the exit status."""
    started = _now()
    stamp = started.strftime("%Y%m%dT%H%M%S_%fZ")
    out = Path(cfg.output_dir) / cfg.protocol_name / stamp
    try:
        out.mkdir(parents=True, exist_ok=False)
    except OSError as exc:
        log.error("cannot create output directory %s: %s", out, exc)
        return EXIT_IO
    if not quiet:
        log.info("running %s (seed %d) -> %s", cfg.protocol_name, cfg.seed, out)
    try:
        files = run_protocol(cfg, out)
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except (RestrackError, ValueError) as exc:
        log.error("protocol error: %s", exc)
        return EXIT_PROTOCOL
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "started": started.isoformat(),
        "finished": _now().isoformat(),
        "files": files,
        "config": to_dict(cfg),
    }
    try:
        (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    except OSError as exc:
        log.error("cannot write manifest: %s", exc)
        return EXIT_IO
    if not quiet:
        log.info("wrote %d files to %s", len(files) + 1, out)
    return EXIT_OK


def load_manifest_config(path) -> RunConfig:
    """The RunConfig recorded in a manifest, ready to re-run."""
    doc = load_yaml(Path(path).read_text())
    return parse_config(yaml.safe_dump(doc["config"]))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="restrack", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a configured protocol")
    run.add_argument("config", help="YAML run configuration (or a run manifest)")
    run.add_argument("--seed", type=int, help="override the configured seed")
    run.add_argument("--out", help="override the configured output directory")
    run.add_argument("--quiet", action="store_true", help="only report errors")
    args = ap.parse_args(argv)

    logging.basicConfig(
        level=logging.ERROR if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        log.error("cannot read %s: %s", args.config, exc)
        return EXIT_CONFIG
    try:
        doc = load_yaml(text)
        if isinstance(doc, dict) and "config" in doc and "files" in doc:
            text = yaml.safe_dump(doc["config"])
        cfg = parse_config(text)
    except (ConfigError, yaml.YAMLError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return execute(cfg, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
