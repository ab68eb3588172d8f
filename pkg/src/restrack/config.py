"""Run configuration: a single YAML document per run.

Example::

    seed: 3
    output_dir: runs
    plant:
      c_q: 2.0e12
    tracker:
      mode: adaptive_k
    protocol:
      name: track_nrus
      steps: 30

Every section is optional; omitted values take their defaults. Unknown keys
and out-of-range values are rejected with the dotted path of the offending
entry.
"""

from __future__ import annotations

import dataclasses
import math
import re
import typing
from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError
from .plant import PlantConfig, default_plant_config
from .tracker import MODES, TrackerConfig


@dataclass(frozen=True)
class PlantSection:
    f_res: float = 8500.0
    alpha_l: float = 0.03
    length: float = 0.14
    mode_n: int = 1
    strain_full: float = 1e-5
    drive_full: float = 150.0
    damping_rise: float = 0.25
    c_q: float = 3e12
    eps_x: float = 2e-6
    fast_fraction: float = 0.5
    eps_sat: typing.Optional[float] = None  # default 1.2 * strain_full
    noise_rms: float = 0.0
    monitor_ratio: float = 0.01
    max_substep: float = 0.05
    bank_tau_min: float = 3e-3
    bank_tau_max: float = 1e4
    bank_per_decade: int = 8
    bank_tilt: float = 0.05

    def build(self) -> PlantConfig:
        kw = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        return default_plant_config(**kw)


@dataclass(frozen=True)
class TrackerSection:
    beta: float = 0.5
    beta_prime: float = 0.5
    mode: str = "full"
    inhibition_iters: int = 2
    k_init: typing.Optional[float] = None
    phi_target: float = 0.0
    literal_eq10_sign: bool = False

    def build(self) -> TrackerConfig:
        return TrackerConfig(**dataclasses.asdict(self))


# Protocol sections. ``calibration: fit`` runs a calibration sweep on the
# virtual sample first; ``true`` uses the plant's own signal chain.


@dataclass(frozen=True)
class CalibrateSection:
    amplitude: float = 1.0
    span: float = 1600.0
    step: float = 8.0
    dwell: float = 0.015
    record_len: float = 0.005
    sample_rate: float = 5e6


@dataclass(frozen=True)
class ScheduleFields:
    a_min: float = 0.5
    a_max: float = 150.0
    steps: int = 60
    record_len: float = 0.005
    sample_rate: float = 5e6
    calibration: str = "fit"


@dataclass(frozen=True)
class TrackNrusSection(ScheduleFields):
    dwell: float = 0.015


@dataclass(frozen=True)
class SweepNrusSection(ScheduleFields):
    steps: int = 6
    dwell: float = 0.015
    f_below: float = 600.0  # sweep starts this far below the linear resonance
    f_above: float = 200.0
    f_step: float = 5.0


@dataclass(frozen=True)
class CondRelaxSection:
    a_low: float = 1.0
    a_cond: float = 150.0
    pre_duration: float = 10.0
    cond_duration: float = 60.0
    relax_duration: float = 3600.0
    record_len: float = 0.005
    sample_rate: float = 5e6
    gap_fraction: float = 0.05
    max_gap: float = 60.0
    calibration: str = "fit"


@dataclass(frozen=True)
class DurationStudySection(ScheduleFields):
    durations: typing.Tuple[float, ...] = (1.4, 5.0, 20.0, 120.0)
    workers: int = 1


@dataclass(frozen=True)
class ModeAblationSection(TrackNrusSection):
    modes: typing.Tuple[str, ...] = MODES
    kde_bandwidth: float = 0.5  # Hz
    workers: int = 1


PROTOCOLS = {
    "calibrate": CalibrateSection,
    "track_nrus": TrackNrusSection,
    "sweep_nrus": SweepNrusSection,
    "cond_relax": CondRelaxSection,
    "duration_study": DurationStudySection,
    "mode_ablation": ModeAblationSection,
}


@dataclass(frozen=True)
class RunConfig:
    protocol_name: str = "track_nrus"
    protocol: object = field(default_factory=TrackNrusSection)
    plant: PlantSection = field(default_factory=PlantSection)
    tracker: TrackerSection = field(default_factory=TrackerSection)
    seed: int = 0
    output_dir: str = "runs"


# --------------------------------------------------------------------------
# Parsing
# --------------------------------------------------------------------------


class _Loader(yaml.SafeLoader):
    """Safe loader where only true/false are booleans, so ``mode: off`` stays a string."""


_Loader.yaml_implicit_resolvers = {
    k: [(tag, rx) for tag, rx in v if tag != "tag:yaml.org,2002:bool"]
    for k, v in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"), list("tTfF")
)


def load_yaml(text):
    return yaml.load(text, Loader=_Loader)


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is tuple:
        item = typing.get_args(tp)[0]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(path, "expected a finite number")
        return value
    if tp is str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    raise ConfigError(path, f"unsupported type {tp}")


def _section(cls, data, path, skip=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names and key not in skip:
            raise ConfigError(f"{path}.{key}", "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{path}.{k}") for k, v in data.items() if k in names}
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise _field_error(exc, names, path) from exc


def _field_error(exc, names, path):
    words = str(exc).split()
    if words and words[0] in names:
        return ConfigError(f"{path}.{words[0]}", str(exc))
    return ConfigError(path, str(exc))


def _positive(obj, path, *names):
    for n in names:
        if not getattr(obj, n) > 0:
            raise ConfigError(f"{path}.{n}", f"{n} must be positive")


def _check_protocol(name, sec):
    p = "protocol"
    if name == "calibrate":
        _positive(sec, p, "amplitude", "span", "step", "dwell", "record_len", "sample_rate")
        if sec.record_len > sec.dwell:
            raise ConfigError(f"{p}.record_len", "record_len exceeds dwell")
        return
    if hasattr(sec, "calibration") and sec.calibration not in ("fit", "true"):
        raise ConfigError(f"{p}.calibration", "calibration must be 'fit' or 'true'")
    if isinstance(sec, ScheduleFields):
        _positive(sec, p, "a_min", "a_max", "steps", "record_len", "sample_rate")
        if sec.a_max < sec.a_min:
            raise ConfigError(f"{p}.a_max", "a_max below a_min")
    if hasattr(sec, "dwell"):
        _positive(sec, p, "dwell")
        if sec.record_len > sec.dwell:
            raise ConfigError(f"{p}.record_len", "record_len exceeds dwell")
    if name == "sweep_nrus":
        _positive(sec, p, "f_step")
        if sec.f_below + sec.f_above <= 0:
            raise ConfigError(f"{p}.f_above", "empty sweep range")
    if name == "cond_relax":
        _positive(sec, p, "a_low", "a_cond", "pre_duration", "cond_duration",
                  "relax_duration", "record_len", "sample_rate", "max_gap")
        if sec.gap_fraction < 0:
            raise ConfigError(f"{p}.gap_fraction", "gap_fraction must be non-negative")
    if name == "duration_study":
        if not sec.durations:
            raise ConfigError(f"{p}.durations", "at least one duration required")
        n = 2 * sec.steps + 1
        for i, T in enumerate(sec.durations):
            if not T / n >= sec.record_len:
                raise ConfigError(f"{p}.durations[{i}]", "duration too short for the schedule")
    if name == "mode_ablation":
        for i, m in enumerate(sec.modes):
            if m not in MODES:
                raise ConfigError(f"{p}.modes[{i}]", f"mode must be one of {MODES}")
        _positive(sec, p, "kde_bandwidth")
    if hasattr(sec, "workers") and sec.workers < 1:
        raise ConfigError(f"{p}.workers", "workers must be at least 1")


def from_dict(doc) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a mapping")
    allowed = {"plant", "tracker", "protocol", "seed", "output_dir"}
    for key in doc:
        if key not in allowed:
            raise ConfigError(str(key), "unknown key")
    proto = doc.get("protocol")
    if proto is None:
        raise ConfigError("protocol", "missing section")
    if isinstance(proto, str):
        proto = {"name": proto}
    if not isinstance(proto, dict):
        raise ConfigError("protocol", "expected a mapping")
    name = proto.get("name")
    if name is None:
        raise ConfigError("protocol.name", "missing protocol name")
    if name not in PROTOCOLS:
        raise ConfigError("protocol.name", f"must be one of {sorted(PROTOCOLS)}")
    sec = _section(PROTOCOLS[name], proto, "protocol", skip=("name",))
    _check_protocol(name, sec)
    plant = _section(PlantSection, doc.get("plant"), "plant")
    try:
        plant.build()
    except ValueError as exc:
        raise _field_error(exc, {f.name for f in fields(PlantSection)}, "plant") from exc
    tracker = _section(TrackerSection, doc.get("tracker"), "tracker")
    try:
        tracker.build()
    except ValueError as exc:
        raise _field_error(exc, {f.name for f in fields(TrackerSection)}, "tracker") from exc
    seed = _coerce(doc.get("seed", 0), int, "seed")
    out = _coerce(doc.get("output_dir", "runs"), str, "output_dir")
    return RunConfig(name, sec, plant, tracker, seed, out)


def parse_config(text: str) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    try:
        doc = load_yaml(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<document>", f"malformed YAML: {exc}") from exc
    return from_dict(doc)


def to_dict(cfg: RunConfig) -> dict:
    def plain(sec):
        out = {}
        for f in fields(sec):
            v = getattr(sec, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    return {
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "plant": plain(cfg.plant),
        "tracker": plain(cfg.tracker),
        "protocol": {"name": cfg.protocol_name, **plain(cfg.protocol)},
    }


def serialize(cfg: RunConfig) -> str:
    """Fully resolved YAML document; ``parse_config(serialize(c)) == c``."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def normalize(text: str) -> str:
    return serialize(parse_config(text))
