"""Command-line workflows: simulate, phase-scan, tomography, error-budget.

Each command reads a YAML config, runs the model, and writes plain
CSV/JSON files plus ``bundle.json`` into ``--out``. ``bundle.json`` holds
the schema version, config hash, seed, package version and the SHA-256 of
every primary file; rerunning with the same config and seed reproduces all
of them byte for byte. Wall-clock provenance goes to ``provenance.json``,
which is not a primary output.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O failure. ``IONPHOTON_SEED``, ``IONPHOTON_SHOTS`` and
``IONPHOTON_THREADS`` override the config; command-line flags override
both.
"""
from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from . import config as cfgmod
from . import phase, sequence, tomography
from .config import ConfigError
from .dynamics import TWO_PI, ConfigurationError, NumericalError
from .integrate import IntegrationError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
BASIS_NAMES = ("sigma+sigma+", "sigma+sigma-", "sigma-sigma+", "sigma-sigma-")


# ---------------------------------------------------------------------------
# Serialization helpers


def _f(x) -> float | None:
    x = float(x)
    return None if not math.isfinite(x) else x


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def _matrix(m) -> dict:
    m = np.asarray(m)
    return {"real": [[_f(v) for v in row] for row in m.real],
            "imag": [[_f(v) for v in row] for row in m.imag]}


def state_payload(st: sequence.TwoPhotonPolarizationState) -> dict:
    out = {
        "basis": list(BASIS_NAMES),
        "efficiency": _f(st.efficiency),
        "stage_efficiencies": [_f(x) for x in st.stage_efficiencies],
        "double_emission": _f(st.double_emission),
        "rho": None,
    }
    if st.rho is not None:
        out.update({
            "rho": _matrix(st.rho),
            "best_bell_fidelity": _f(st.best_bell_fidelity()),
            "fidelity_psi_plus": _f(st.fidelity("psi+")),
            "fidelity_psi_minus": _f(st.fidelity("psi-")),
            "coherence_phase_rad": _f(st.coherence_phase()),
            "expectations": {b + b: _f(tomography.pauli_expectation(st.rho, b))
                             for b in tomography.BASES},
        })
    ip = st.ion_photon
    if ip is not None:
        out["ion_photon"] = {"basis": ["D,sigma+", "D,sigma-", "D',sigma+", "D',sigma-"],
                             "rho": _matrix(ip.rho), "leakage": _f(ip.leakage),
                             "photon1_probability": _f(ip.probability)}
    return out


class Bundle:
    """Collects primary files and writes them with ``bundle.json``."""

    def __init__(self, command: str, doc: dict, seed: int):
        self.command, self.doc, self.seed = command, doc, seed
        self.files: dict[str, str] = {}

    def add(self, name: str, text: str):
        self.files[name] = text

    def write(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.add("config.yaml", cfgmod.dump(self.doc))
        for name, text in sorted(self.files.items()):
            with open(os.path.join(out_dir, name), "w", encoding="utf-8", newline="") as f:
                f.write(text)
        meta = {
            "schema_version": cfgmod.SCHEMA_VERSION,
            "command": self.command,
            "config_hash": cfgmod.config_hash(self.doc),
            "seed": self.seed,
            "version": __version__,
            "files": {n: hashlib.sha256(t.encode()).hexdigest()
                      for n, t in sorted(self.files.items())},
        }
        with open(os.path.join(out_dir, "bundle.json"), "w", encoding="utf-8") as f:
            f.write(_json(meta))
        prov = {"written_utc": datetime.datetime.now(datetime.timezone.utc).isoformat()}
        with open(os.path.join(out_dir, "provenance.json"), "w", encoding="utf-8") as f:
            f.write(_json(prov))
        return meta


# ---------------------------------------------------------------------------
# Workflows (importable; return a Bundle)


def prepared(doc: dict, lock: bool = True) -> sequence.ExperimentConfig:
    """Model config with amplitude balance and (optionally) the phase lock applied.

    The lock is skipped when a stage is switched off, since no pairs exist.
    """
    cfg = cfgmod.experiment_config(doc)
    if doc["sequence"]["calibrate"]:
        cfg = sequence.calibrate(cfg)
    target = cfgmod.phase_lock_target(doc)
    dark = any(all(t.rabi == 0 for t in cfg.stage(k).drive.tones)
               for k in range(1, len(cfg.generation_steps) + 1))
    if lock and target is not None and not dark:
        cfg = sequence.calibrate_phase(cfg, target)
    return cfg


def _pmap(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _shape_rows(cfg, n_points: int):
    rows = []
    for k in (1, 2):
        s = sequence.photon_shape(cfg, k, n_points)
        for t, a, b in zip(s.times, s.density["sigma+"], s.density["sigma-"]):
            rows.append((k, float(t), float(a), float(b)))
    return rows


def run_simulate(doc: dict, seed: int, threads: int = 1) -> Bundle:
    b = Bundle("simulate", doc, seed)
    cfg = prepared(doc)
    st = sequence.conditional_two_photon_state(cfg)
    b.add("state.json", _json(state_payload(st)))
    b.add("shapes.csv", _csv(("stage", "time_us", "sigma_plus_per_us", "sigma_minus_per_us"),
                             _shape_rows(cfg, doc["numerics"]["shape_points"])))
    sweep = doc.get("sweep")
    if sweep:
        def point(v):
            c = prepared(cfgmod.set_path(doc, sweep["path"], v))
            s = sequence.conditional_two_photon_state(c)
            ok = s.rho is not None
            return (float(v), float(s.efficiency),
                    float(s.best_bell_fidelity()) if ok else float("nan"),
                    *[float(tomography.pauli_expectation(s.rho, x)) if ok else float("nan")
                      for x in tomography.BASES])

        rows = _pmap(point, sweep["values"], threads)
        b.add("sweep.csv", _csv((sweep["path"], "efficiency", "best_bell_fidelity",
                                 *(x.lower() * 2 for x in tomography.BASES)), rows))
    return b


def _child_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def run_phase_scan(doc: dict, seed: int, shots: int | None = None, threads: int = 1) -> Bundle:
    b = Bundle("phase-scan", doc, seed)
    ps = doc["phase_scan"]
    cfg = prepared(doc, lock=False)
    xs = np.linspace(ps["phase_start_rad"], ps["phase_stop_rad"], ps["points"], endpoint=False)
    n_ev = shots or ps["events_per_point"]
    model = cfg.detection

    def point(i):
        x = float(xs[i])
        c = cfg.with_phase(ps["stage"], ps["tone"], x + ps["offset_rad"])
        st = sequence.conditional_two_photon_state(c)
        if st.rho is None:
            raise NumericalError("no photon pairs at this scan point")
        counts = tomography.detect(st.rho, "X", model, _child_seed(seed, 1, i), n_shots=n_ev)
        e, err = tomography.correlation_expectation(counts)
        return (x, e, err, tomography.pauli_expectation(st.rho, "X"), counts.total)

    rows = _pmap(point, range(len(xs)), threads)
    fit = phase.fit_phase_scan([(r[0], r[1]) for r in rows])
    b.add("points.csv", _csv(("phase_rad", "xx", "xx_err", "xx_exact", "n_events"), rows))
    b.add("fit.json", _json({
        "amplitude": _f(fit.amplitude), "phase_rad": _f(fit.phase),
        "residual_rms": _f(fit.residual_rms), "amplitude_error": _f(fit.amplitude_error),
        "phase_error_rad": _f(fit.phase_error), "n_points": fit.n_points,
        "phase_identifiable": fit.phase_identifiable, "offset_rad": _f(ps["offset_rad"]),
        "scanned": {"stage": ps["stage"], "tone": ps["tone"]},
    }))
    return b


def _time_sampler(shape: sequence.PhotonShape):
    f = shape.total()
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(shape.times))])
    if cdf[-1] <= 0:
        return None
    cdf /= cdf[-1]

    def draw(rng, n):
        return np.interp(rng.random(n), cdf, shape.times)

    return draw


def tomography_counts(cfg, rho, basis_index: int, events: int, seed: int, mode: str,
                      chunk: int, times=None, max_rounds: int = 1000):
    """Collect accepted events in one basis until ``events`` are reached."""
    basis = tomography.BASES[basis_index]
    model = cfg.detection
    accepted, tallies, clicks = [], {}, []
    shot0 = 0
    for rnd in range(max_rounds):
        if mode == "state":
            rng = np.random.default_rng(_child_seed(seed, 2, basis_index, rnd))
            cl = tomography.simulate_clicks(rho, basis, model, chunk, rng, times, shot0)
        else:
            cl = sequence.sample_experiment(cfg, chunk, _child_seed(seed, 3, basis_index),
                                            basis, first_shot=shot0)
        shot0 += chunk
        clicks.extend(cl)
        sel = tomography.post_select(cl, model)
        for k, v in sel.tallies.items():
            tallies[k] = tallies.get(k, 0) + v
        accepted.extend(sel.events)
        if len(accepted) >= events:
            break
    else:
        raise NumericalError(f"basis {basis}: only {len(accepted)} accepted events after "
                             f"{shot0} shots")
    accepted = accepted[:events]
    last = accepted[-1][0]
    clicks = [c for c in clicks if c.shot <= last]
    return tomography.count_events(accepted, basis), tallies, clicks


def run_tomography(doc: dict, seed: int, shots: int | None = None, threads: int = 1) -> Bundle:
    b = Bundle("tomography", doc, seed)
    tm = doc["tomography"]
    cfg = prepared(doc)
    st = sequence.conditional_two_photon_state(cfg)
    if st.rho is None:
        raise NumericalError("the configuration produces no photon pairs")
    times = tomography.PhotonTimes(
        _time_sampler(sequence.photon_shape(cfg, 1)),
        _time_sampler(sequence.photon_shape(cfg, 2)))
    chunk = shots or (tm["shots"] if tm["mode"] == "trajectories" else
                      max(4 * tm["events_per_basis"], 100))

    def basis_job(i):
        return tomography_counts(cfg, st.rho, i, tm["events_per_basis"], seed, tm["mode"],
                                 chunk, times)

    results = _pmap(basis_job, range(3), threads)
    exps = {}
    for (counts, tallies, clicks), basis in zip(results, tomography.BASES):
        exps[basis] = tomography.correlation_expectation(counts)
        b.add(f"clicks_{basis}.csv", tomography.clicks_to_csv(clicks))
    fid, ferr = tomography.bell_fidelity(exps["X"], exps["Y"], exps["Z"], tm["target"])
    b.add("counts.json", tomography.counts_to_json([r[0] for r in results]) + "\n")
    b.add("summary.json", _json({
        "target": tm["target"],
        "fidelity": _f(fid), "fidelity_error": _f(ferr),
        "expectations": {x + x: {"value": _f(v), "error": _f(e)} for x, (v, e) in exps.items()},
        "tallies": {x: r[1] for x, r in zip(tomography.BASES, results)},
        "model_fidelity": _f(st.fidelity(tm["target"])),
        "model_best_bell_fidelity": _f(st.best_bell_fidelity()),
    }))
    return b


def _toggled(doc: dict, **kw) -> dict:
    out = json.loads(json.dumps(doc))
    out["toggles"].update(kw)
    return out


def run_error_budget(doc: dict, seed: int, threads: int = 1) -> Bundle:
    """Each error mechanism switched on alone against the error-free model."""
    b = Bundle("error-budget", doc, seed)
    eb = doc["error_budget"]
    clean = _toggled(doc, stark_asymmetry=False, zeeman_mismatch_mhz_over_2pi=0.0, drift=False)
    cfg_clean = prepared(clean)
    f_clean = sequence.conditional_two_photon_state(cfg_clean).best_bell_fidelity()
    dist = sequence.delay_distribution(cfg_clean)
    rows = []

    def zeeman(khz):
        d = _toggled(clean, zeeman_mismatch_mhz_over_2pi=khz / 1000)
        f = sequence.conditional_two_photon_state(prepared(d)).best_bell_fidelity()
        pred = phase.zeeman_mismatch_infidelity(dist, TWO_PI * khz / 1000)
        return ("zeeman_mismatch", f"{khz:g} kHz", f, f_clean, 100 * (f_clean - f), 100 * pred)

    rows.extend(_pmap(zeeman, eb["zeeman_mismatch_khz"], threads))
    on = cfgmod.experiment_config(_toggled(doc, stark_asymmetry=True,
                                           zeeman_mismatch_mhz_over_2pi=0.0, drift=False))
    tr = phase.stark_tradeoff(on, bounds=tuple(eb["stark_scale_bounds"]))
    for name, row in (("optimal efficiency", tr.optimal), ("2/3 efficiency", tr.two_thirds)):
        rows.append(("stark_asymmetry",
                     f"{name}; stage-2 Rabi {row.rabi_mhz:.3f} MHz; efficiency "
                     f"{row.efficiency:.4g}", row.fidelity, row.fidelity_no_stark,
                     100 * row.deficit, float("nan")))
    d = _toggled(clean, drift=True)
    f = sequence.conditional_two_photon_state(prepared(d)).best_bell_fidelity()
    rows.append(("drift", f"lumped {100 * doc['toggles']['drift_infidelity']:g}%", f, f_clean,
                 100 * (f_clean - f), 100 * doc["toggles"]["drift_infidelity"]))
    rows.append(("ceiling", "stark on at optimal efficiency, others off", tr.optimal.fidelity,
                 1.0, 100 * (1 - tr.optimal.fidelity), float("nan")))
    header = ("mechanism", "setting", "fidelity", "reference_fidelity", "infidelity_points",
              "predicted_points")
    b.add("budget.csv", _csv(header, rows))
    b.add("budget.json", _json([{k: (_f(v) if isinstance(v, float) else v)
                                 for k, v in zip(header, r)} for r in rows]))
    return b


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ionphoton", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "two-photon state and photon shapes"),
                        ("phase-scan", "<XX> versus a stage-2 tone phase, with sine fit"),
                        ("tomography", "three-basis correlation counts and Bell fidelity"),
                        ("error-budget", "infidelity per error mechanism")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="YAML run configuration")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--shots", type=int, default=None)
        s.add_argument("--threads", type=int, default=None)
    s = sub.add_parser("sample-config", help="print the sample configuration")
    s.add_argument("--out", default=None, help="write to this file instead of stdout")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "sample-config":
            if args.out:
                with open(args.out, "w", encoding="utf-8") as f:
                    f.write(cfgmod.SAMPLE_CONFIG)
            else:
                sys.stdout.write(cfgmod.SAMPLE_CONFIG)
            return EXIT_OK
        doc = cfgmod.load(args.config)
        env = cfgmod.env_overrides(os.environ)
        seed = args.seed if args.seed is not None else (env.seed if env.seed is not None
                                                         else doc["seed"])
        shots = args.shots if args.shots is not None else env.shots
        threads = args.threads or env.threads or 1
        if shots is not None and shots < 1:
            raise ConfigError("--shots must be >= 1", None, "<arguments>")
        doc["seed"] = seed
        if args.command == "simulate":
            bundle = run_simulate(doc, seed, threads)
        elif args.command == "phase-scan":
            bundle = run_phase_scan(doc, seed, shots, threads)
        elif args.command == "tomography":
            bundle = run_tomography(doc, seed, shots, threads)
        else:
            bundle = run_error_budget(doc, seed, threads)
        bundle.write(args.out)
    except (ConfigError, ConfigurationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IntegrationError, NumericalError, sequence.CalibrationError,
            np.linalg.LinAlgError, FloatingPointError, phase.ScanError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
