"""YAML run configuration with explicit-unit keys.

Every physical quantity names its unit in the key (``_mhz_over_2pi`` for
ordinary frequencies, which are multiplied by 2*pi on the way in;
``_us`` for times; ``_rad`` for phases). Unknown keys are rejected, and
errors carry the line of the offending key.

The canonical form (:func:`canonical`) is the fully defaulted document;
parse -> serialize -> parse is the identity on it.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass

import yaml

from . import atomic
from .dynamics import DEFAULT_SPONTANEOUS_RATES, TWO_PI, Envelope, SystemParams
from .sequence import (BichromaticPhotonGeneration, ErrorToggles, ExperimentConfig,
                       Initialize, Wait, stage1_drive, stage2_drive)
from .tomography import DetectionModel

SCHEMA_VERSION = 1
ENV_PREFIX = "IONPHOTON_"


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)


def _stage_defaults(rabi: float, ratio: float) -> dict:
    return {
        "rabi_mhz_over_2pi": rabi,
        "ratio_b_over_a": ratio,
        "phase_a_rad": 0.0,
        "phase_b_rad": 0.0,
        "duration_us": 1.0,
        "rise_time_us": 1 / 3,
        "shape": "flattop",
        "window_us": 3.0,
    }


DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 12345,
    "system": {
        "g0_mhz_over_2pi": 0.76,
        "kappa_mhz_over_2pi": 0.27,
        "field_gauss": 8.25,
        "cavity_detuning_mhz_over_2pi": -60.0,
        "spontaneous_rates_per_us": {str(k): v for k, v in DEFAULT_SPONTANEOUS_RATES.items()},
        "n_max": 1,
    },
    "sequence": {
        "init_term": "D3/2",
        "init_m_j": -0.5,
        "init_fidelity": 1.0,
        "error_population": "neighbors",
        "separation_us": 6.0,
        "calibrate": True,
        "phase_lock": "target",
        "stage1": _stage_defaults(30.0, 0.74),
        "stage2": _stage_defaults(17.0, 0.92),
    },
    "toggles": {
        "zeeman_mismatch_mhz_over_2pi": 0.0,
        "zeeman_model": "dephasing",
        "stark_asymmetry": True,
        "drift": False,
        "drift_infidelity": 0.01,
    },
    "detection": {
        "extinction_ratio": 15000.0,
        "dark_count_rate_per_us": 0.0,
        "detection_efficiency": 1.0,
        "windows_us": [[0.0, 3.0], [6.0, 9.0]],
    },
    "numerics": {
        "tolerance": 1e-7,
        "secular_cutoff_mhz_over_2pi": 5.0,
        "shape_points": 601,
    },
    "tomography": {
        "events_per_basis": 100,
        "target": "psi+",
        "mode": "state",
        "shots": 20000,
    },
    "phase_scan": {
        "stage": 2,
        "tone": "b",
        "phase_start_rad": 0.0,
        "phase_stop_rad": 2 * math.pi,
        "points": 13,
        "events_per_point": 20000,
        "offset_rad": 0.0,
    },
    "error_budget": {
        "zeeman_mismatch_khz": [0.0, 50.0, 100.0, 150.0, 200.0],
        "stark_scale_bounds": [0.6, 1.6],
    },
    "sweep": None,
}

# keys whose value is a free-form mapping (no key validation below them)
_FREE = {("system", "spontaneous_rates_per_us")}
_CHOICES = {
    ("sequence", "error_population"): ("neighbors", "manifold"),
    ("sequence", "phase_lock"): ("target", "none", "psi+", "psi-"),
    ("sequence", "stage1", "shape"): ("flattop", "sin2"),
    ("sequence", "stage2", "shape"): ("flattop", "sin2"),
    ("tomography", "mode"): ("state", "trajectories"),
    ("toggles", "zeeman_model"): ("dephasing", "detuning"),
    ("tomography", "target"): ("psi+", "psi-"),
    ("phase_scan", "tone"): ("a", "b"),
}


def _lines(node, path=(), out=None) -> dict:
    """Map key paths to 1-based source lines from a composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            p = path + (str(k.value),)
            out[p] = k.start_mark.line + 1
            _lines(v, p, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            out[path + (i,)] = v.start_mark.line + 1
            _lines(v, path + (i,), out)
    return out


def _line_of(lines: dict, path) -> int | None:
    path = tuple(path)
    while path:
        if path in lines:
            return lines[path]
        path = path[:-1]
    return None


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def _merge(defaults, data, path, lines, source):
    if not isinstance(data, dict):
        raise ConfigError(f"'{'.'.join(map(str, path)) or 'document'}' must be a mapping",
                          _line_of(lines, path), source)
    out = copy.deepcopy(defaults)
    for key, value in data.items():
        p = path + (str(key),)
        if str(key) not in defaults:
            raise ConfigError(f"unknown key '{'.'.join(p)}'", _line_of(lines, p), source)
        d = defaults[str(key)]
        if p in _FREE:
            if not isinstance(value, dict):
                raise ConfigError(f"'{'.'.join(p)}' must be a mapping", _line_of(lines, p), source)
            out[str(key)] = {str(k): float(v) for k, v in value.items()}
        elif isinstance(d, dict):
            out[str(key)] = _merge(d, value, p, lines, source)
        elif d is None:
            out[str(key)] = value
        else:
            if not _type_ok(d, value):
                raise ConfigError(f"'{'.'.join(p)}' expects {type(d).__name__}, got "
                                  f"{type(value).__name__}", _line_of(lines, p), source)
            if p in _CHOICES and value not in _CHOICES[p]:
                raise ConfigError(f"'{'.'.join(p)}' must be one of {list(_CHOICES[p])}",
                                  _line_of(lines, p), source)
            out[str(key)] = float(value) if isinstance(d, float) else value
    return out


def _validate_sweep(sweep, lines, source):
    if sweep is None:
        return None
    if not isinstance(sweep, dict) or set(sweep) != {"path", "values"}:
        raise ConfigError("'sweep' needs exactly the keys 'path' and 'values'",
                          _line_of(lines, ("sweep",)), source)
    path = str(sweep["path"]).split(".")
    node = DEFAULTS
    for k in path:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"sweep path '{sweep['path']}' does not name a parameter",
                              _line_of(lines, ("sweep", "path")), source)
        node = node[k]
    if isinstance(node, (dict, list, str)) or node is None:
        raise ConfigError(f"sweep path '{sweep['path']}' is not a scalar parameter",
                          _line_of(lines, ("sweep", "path")), source)
    vals = sweep["values"]
    if not isinstance(vals, list) or not vals:
        raise ConfigError("sweep values must be a non-empty list",
                          _line_of(lines, ("sweep", "values")), source)
    return {"path": ".".join(path), "values": [float(v) for v in vals]}


def _check_ranges(doc, lines, source):
    def bad(path, msg):
        raise ConfigError(f"'{'.'.join(path)}' {msg}", _line_of(lines, path), source)

    s = doc["system"]
    for k in ("g0_mhz_over_2pi", "kappa_mhz_over_2pi", "field_gauss"):
        if s[k] < 0:
            bad(("system", k), "must be >= 0")
    if s["n_max"] < 1:
        bad(("system", "n_max"), "must be >= 1")
    q = doc["sequence"]
    if not 0 <= q["init_fidelity"] <= 1:
        bad(("sequence", "init_fidelity"), "must lie in [0, 1]")
    for st in ("stage1", "stage2"):
        g = q[st]
        for k in ("rabi_mhz_over_2pi", "ratio_b_over_a", "duration_us", "window_us"):
            if g[k] < 0 or (k in ("duration_us", "window_us") and g[k] == 0):
                bad(("sequence", st, k), "must be positive")
        if g["duration_us"] > g["window_us"]:
            bad(("sequence", st, "duration_us"), "must fit inside window_us")
    if q["separation_us"] < q["stage1"]["window_us"]:
        bad(("sequence", "separation_us"), "must be >= the stage-1 window")
    try:
        atomic.level(q["init_term"], q["init_m_j"])
    except ValueError as e:
        bad(("sequence", "init_term"), f"is not a valid level ({e})")
    d = doc["detection"]
    if d["extinction_ratio"] < 1:
        bad(("detection", "extinction_ratio"), "must be >= 1")
    if not 0 < d["detection_efficiency"] <= 1:
        bad(("detection", "detection_efficiency"), "must lie in (0, 1]")
    if d["dark_count_rate_per_us"] < 0:
        bad(("detection", "dark_count_rate_per_us"), "must be >= 0")
    if doc["tomography"]["events_per_basis"] < 1:
        bad(("tomography", "events_per_basis"), "must be >= 1")
    ps = doc["phase_scan"]
    if ps["points"] < 4:
        bad(("phase_scan", "points"), "must be >= 4")
    if ps["stage"] not in (1, 2):
        bad(("phase_scan", "stage"), "must be 1 or 2")
    if abs(ps["phase_stop_rad"] - ps["phase_start_rad"]) <= math.pi:
        bad(("phase_scan", "phase_stop_rad"), "scan must span more than pi")
    try:
        detection_model(doc)
    except ValueError as e:
        bad(("detection", "windows_us"), str(e))


def parse(text: str, source: str = "<config>") -> dict:
    """Validate a YAML document and return its canonical (defaulted) form."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(e, 'problem', e)}",
                          mark.line + 1 if mark else None, source) from None
    lines = _lines(node) if node is not None else {}
    data = {} if data is None else data
    doc = _merge(DEFAULTS, data, (), lines, source)
    if doc["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {doc['schema_version']}",
                          _line_of(lines, ("schema_version",)), source)
    doc["sweep"] = _validate_sweep(doc.get("sweep"), lines, source)
    _check_ranges(doc, lines, source)
    return doc


def load(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse(text, source=str(path))


def dump(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)


def canonical(doc: dict) -> str:
    """Canonical JSON text of a parsed document (hash input)."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def config_hash(doc: dict) -> str:
    return hashlib.sha256(canonical(doc).encode()).hexdigest()


def set_path(doc: dict, path: str, value) -> dict:
    """Copy of ``doc`` with the dotted ``path`` set to ``value``."""
    out = copy.deepcopy(doc)
    node = out
    keys = path.split(".")
    for k in keys[:-1]:
        node = node[k]
    old = node[keys[-1]]
    node[keys[-1]] = (int(value) if isinstance(old, int) and not isinstance(old, bool)
                      else type(old)(value))
    return out


# ---------------------------------------------------------------------------
# Conversion to model objects


def system_params(doc: dict) -> SystemParams:
    s = doc["system"]
    return SystemParams.from_mhz(
        g0_mhz_over_2pi=s["g0_mhz_over_2pi"],
        kappa_mhz_over_2pi=s["kappa_mhz_over_2pi"],
        field_gauss=s["field_gauss"],
        cavity_detuning_mhz_over_2pi=s["cavity_detuning_mhz_over_2pi"],
        spontaneous_rates={int(k): float(v) for k, v in s["spontaneous_rates_per_us"].items()},
    )


def detection_model(doc: dict) -> DetectionModel:
    d = doc["detection"]
    return DetectionModel(
        extinction_ratio=d["extinction_ratio"],
        dark_count_rate=d["dark_count_rate_per_us"],
        windows=tuple(tuple(w) for w in d["windows_us"]),
        detection_efficiency=d["detection_efficiency"],
    )


def _drive(builder, g: dict):
    env = Envelope(g["duration_us"], g["rise_time_us"], 0.0, g["shape"])
    d = builder(TWO_PI * g["rabi_mhz_over_2pi"], g["ratio_b_over_a"], env, g["phase_b_rad"])
    return d.replace(tone_a=d.tone_a.replace(phase=g["phase_a_rad"]))


def phase_lock_target(doc: dict) -> str | None:
    """Bell state the pair phase is locked to, or None for no lock."""
    lock = doc["sequence"]["phase_lock"]
    if lock == "none":
        return None
    return doc["tomography"]["target"] if lock == "target" else lock


def experiment_config(doc: dict) -> ExperimentConfig:
    q = doc["sequence"]
    steps = (
        Initialize(atomic.level(q["init_term"], q["init_m_j"]), q["init_fidelity"]),
        BichromaticPhotonGeneration(_drive(stage1_drive, q["stage1"]), q["stage1"]["window_us"]),
        Wait(q["separation_us"] - q["stage1"]["window_us"]),
        BichromaticPhotonGeneration(_drive(stage2_drive, q["stage2"]), q["stage2"]["window_us"]),
    )
    t = doc["toggles"]
    toggles = ErrorToggles(TWO_PI * t["zeeman_mismatch_mhz_over_2pi"], t["stark_asymmetry"],
                           t["drift"], t["drift_infidelity"], t["zeeman_model"])
    n = doc["numerics"]
    return ExperimentConfig(
        params=system_params(doc), steps=steps, detection=detection_model(doc),
        toggles=toggles, n_max=doc["system"]["n_max"], tolerance=n["tolerance"],
        secular_cutoff=(TWO_PI * n["secular_cutoff_mhz_over_2pi"]
                        if n["secular_cutoff_mhz_over_2pi"] > 0 else None),
        error_population=q["error_population"],
    )


@dataclass(frozen=True)
class Overrides:
    """Values from the command line or environment that replace config entries."""

    seed: int | None = None
    shots: int | None = None
    threads: int | None = None


def env_overrides(environ) -> Overrides:
    """``IONPHOTON_SEED``, ``IONPHOTON_SHOTS`` and ``IONPHOTON_THREADS``."""
    vals = {}
    for k in ("seed", "shots", "threads"):
        raw = environ.get(ENV_PREFIX + k.upper())
        if raw is not None and raw != "":
            try:
                vals[k] = int(raw)
            except ValueError:
                raise ConfigError(f"environment variable {ENV_PREFIX + k.upper()} must be an "
                                  f"integer, got {raw!r}", None, "<environment>") from None
    return Overrides(**vals)


SAMPLE_CONFIG = """\
# Photon-pair simulation: sample configuration.
# Frequencies are ordinary frequencies in MHz (the code multiplies by 2*pi),
# times are in microseconds, phases in radians.
schema_version: 1
seed: 12345
system:
  g0_mhz_over_2pi: 0.76
  kappa_mhz_over_2pi: 0.27
  field_gauss: 8.25
  cavity_detuning_mhz_over_2pi: -60.0
  n_max: 1
sequence:
  init_fidelity: 1.0
  separation_us: 6.0
  calibrate: true
  phase_lock: target      # lock the pair phase to tomography.target
  stage1:
    rabi_mhz_over_2pi: 30.0
    duration_us: 1.0
    rise_time_us: 0.3333333333333333
    window_us: 3.0
  stage2:
    rabi_mhz_over_2pi: 17.0
    duration_us: 1.0
    rise_time_us: 0.3333333333333333
    window_us: 3.0
toggles:
  zeeman_mismatch_mhz_over_2pi: 0.0
  zeeman_model: dephasing   # or detuning: detune the D' drive tones instead
  stark_asymmetry: true
  drift: false
detection:
  extinction_ratio: 15000.0
  dark_count_rate_per_us: 0.0
  detection_efficiency: 1.0
  windows_us: [[0.0, 3.0], [6.0, 9.0]]
tomography:
  events_per_basis: 100
  target: psi+
"""
