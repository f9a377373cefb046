"""Polarization analysis chain and Bell-state fidelity estimation.

Each photon passes a quarter-wave plate, a half-wave plate and a polarizing
beam splitter whose transmitted (``T``, H) and reflected (``R``, V) ports
feed one detector each. Outcome ``+`` is a ``T`` click and ``-`` an ``R``
click.

Polarization conventions (Jones vectors in the H/V basis):

* ``D = (H + V)/sqrt2`` and ``R = (H + iV)/sqrt2``, the +1 eigenstates of
  the Pauli X and Y operators, so the fidelity witness holds with the usual
  signs.
* Cavity photons leave with ``sigma+ -> R`` and ``sigma- -> L``. A fixed
  collection quarter-wave plate maps them onto H and V before the analysis
  optics, so the H/V basis is the photon-number basis of the cavity modes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BASES = ("Z", "X", "Y")
BASIS_LABELS = {"Z": "H/V", "X": "D/A", "Y": "R/L"}
DETECTORS = ("T", "R")

H = np.array([1.0, 0.0], dtype=complex)
V = np.array([0.0, 1.0], dtype=complex)
EIGENSTATES = {
    "Z": (H, V),
    "X": (np.array([1, 1]) / math.sqrt(2), np.array([1, -1]) / math.sqrt(2)),
    "Y": (np.array([1, 1j]) / math.sqrt(2), np.array([1, -1j]) / math.sqrt(2)),
}
# cavity polarization basis (sigma+, sigma-) as Jones vectors
SIGMA_TO_JONES = np.column_stack(EIGENSTATES["Y"]).astype(complex)


def _wrap(angle: float) -> float:
    a = math.fmod(angle, math.pi)
    if a < 0:
        a += math.pi
    return 0.0 if a >= math.pi else a


@dataclass(frozen=True)
class WaveplateSetting:
    qwp_angle: float = 0.0
    hwp_angle: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "qwp_angle", _wrap(self.qwp_angle))
        object.__setattr__(self, "hwp_angle", _wrap(self.hwp_angle))


def _rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


def retarder(theta: float, retardance: float) -> np.ndarray:
    """Linear retarder with fast axis at ``theta`` (symmetric phase form)."""
    core = np.diag([np.exp(-0.5j * retardance), np.exp(0.5j * retardance)])
    return _rotation(theta) @ core @ _rotation(-theta)


def waveplate_unitary(setting: WaveplateSetting) -> np.ndarray:
    """``U_hwp(theta_h) @ U_qwp(theta_q)``: the QWP acts first."""
    return retarder(setting.hwp_angle, math.pi) @ retarder(setting.qwp_angle, math.pi / 2)


_SETTINGS = {
    "Z": WaveplateSetting(0.0, 0.0),
    "X": WaveplateSetting(math.pi / 4, math.pi / 8),
    "Y": WaveplateSetting(math.pi / 4, 0.0),
}
COLLECTION = WaveplateSetting(math.pi / 4, 0.0)


def basis_settings(basis: str) -> WaveplateSetting:
    """Waveplate angles sending the ``+`` eigenstate of ``basis`` to the T port."""
    if basis not in _SETTINGS:
        raise ValueError(f"unknown basis {basis!r}; expected one of {BASES}")
    s = _SETTINGS[basis]
    u = waveplate_unitary(s)
    plus, minus = EIGENSTATES[basis]
    if abs((u @ plus)[0]) ** 2 < 1 - 1e-12 or abs((u @ minus)[1]) ** 2 < 1 - 1e-12:
        raise AssertionError(f"waveplate table inconsistent for basis {basis}")
    return s


@dataclass(frozen=True)
class DetectionModel:
    """Splitter, detector and timing-window parameters.

    ``windows`` are the (start, end) acceptance windows in us of photon
    slots 1 and 2; ``dark_count_rate`` is per detector in counts/us.
    ``collection`` maps the cavity polarizations onto the lab frame.
    """

    extinction_ratio: float = 15000.0
    dark_count_rate: float = 0.0
    windows: tuple = ((0.0, 3.0), (6.0, 9.0))
    detection_efficiency: float = 1.0
    collection: WaveplateSetting = COLLECTION

    def __post_init__(self):
        if not self.extinction_ratio >= 1:
            raise ValueError("extinction ratio must be >= 1")
        if not 0 < self.detection_efficiency <= 1:
            raise ValueError("detection efficiency must lie in (0, 1]")
        if self.dark_count_rate < 0:
            raise ValueError("dark count rate must be >= 0")
        w = tuple(tuple(float(x) for x in win) for win in self.windows)
        if len(w) != 2 or any(len(x) != 2 or x[1] <= x[0] or x[0] < 0 for x in w):
            raise ValueError("need two windows (start, end) with 0 <= start < end")
        (a0, a1), (b0, b1) = w
        if a0 < b1 and b0 < a1:
            raise ValueError("photon timing windows overlap")
        object.__setattr__(self, "windows", w)

    @property
    def leakage(self) -> float:
        return 1.0 / self.extinction_ratio

    @classmethod
    def ideal(cls, windows=((0.0, 3.0), (6.0, 9.0))) -> "DetectionModel":
        return cls(extinction_ratio=math.inf, windows=windows)

    def analyzer(self, basis: str) -> np.ndarray:
        """Single-photon map from (sigma+, sigma-) amplitudes to (T, R) ports."""
        return (waveplate_unitary(basis_settings(basis)) @ waveplate_unitary(self.collection)
                @ SIGMA_TO_JONES)


@dataclass(frozen=True)
class ClickRecord:
    shot: int
    slot: int
    detector: str
    timestamp_us: float

    def __post_init__(self):
        if self.timestamp_us < 0:
            raise ValueError("timestamp must be >= 0")
        if self.detector not in DETECTORS:
            raise ValueError(f"detector must be one of {DETECTORS}")
        if self.slot not in (1, 2):
            raise ValueError("slot must be 1 or 2")


CSV_HEADER = ("shot", "slot", "detector", "timestamp_us")


def _fmt_time(t: float) -> str:
    return f"{t:.9f}"


def clicks_to_csv(clicks: Iterable[ClickRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for c in clicks:
        w.writerow([c.shot, c.slot, c.detector, _fmt_time(c.timestamp_us)])
    return buf.getvalue()


def clicks_from_csv(text: str) -> list[ClickRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"click CSV must start with header {','.join(CSV_HEADER)}")
    return [ClickRecord(int(r[0]), int(r[1]), r[2], float(r[3])) for r in rows[1:] if r]


def clicks_to_jsonl(clicks: Iterable[ClickRecord]) -> str:
    lines = [json.dumps({"shot": c.shot, "slot": c.slot, "detector": c.detector,
                         "timestamp_us": float(_fmt_time(c.timestamp_us))})
             for c in clicks]
    return "".join(line + "\n" for line in lines)


def clicks_from_jsonl(text: str) -> list[ClickRecord]:
    out = []
    for line in text.splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(ClickRecord(int(d["shot"]), int(d["slot"]), d["detector"],
                                   float(d["timestamp_us"])))
    return out


@dataclass
class CorrelationCounts:
    basis: str
    n_pp: int = 0
    n_pm: int = 0
    n_mp: int = 0
    n_mm: int = 0

    def __post_init__(self):
        if self.basis not in BASES:
            raise ValueError(f"unknown basis {self.basis!r}")
        if min(self.n_pp, self.n_pm, self.n_mp, self.n_mm) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.n_pp + self.n_pm + self.n_mp + self.n_mm

    def __add__(self, other: "CorrelationCounts") -> "CorrelationCounts":
        if other.basis != self.basis:
            raise ValueError("cannot merge counts of different bases")
        return CorrelationCounts(self.basis, self.n_pp + other.n_pp, self.n_pm + other.n_pm,
                                 self.n_mp + other.n_mp, self.n_mm + other.n_mm)

    def to_json(self) -> dict:
        return {"basis": self.basis, "label": BASIS_LABELS[self.basis], "n_pp": self.n_pp,
                "n_pm": self.n_pm, "n_mp": self.n_mp, "n_mm": self.n_mm}


def outcome_probabilities(rho2: np.ndarray, basis: str, model: DetectionModel) -> np.ndarray:
    """Joint port probabilities ``[[TT, TR], [RT, RR]]`` before detector imperfections."""
    rho2 = np.asarray(rho2, dtype=complex)
    if rho2.shape != (4, 4):
        raise ValueError("two-photon state must be 4x4")
    u = model.analyzer(basis)
    uu = np.kron(u, u)
    lab = uu @ rho2 @ uu.conj().T
    p = np.clip(np.diag(lab).real, 0.0, None)
    p = p / p.sum()
    return p.reshape(2, 2)


def _with_leakage(p: np.ndarray, leak: float) -> np.ndarray:
    flip = np.array([[1 - leak, leak], [leak, 1 - leak]])
    return flip @ p @ flip.T


@dataclass(frozen=True)
class PhotonTimes:
    """Arrival-time samplers for the two photon slots (default: window-uniform)."""

    slot1: object = None
    slot2: object = None


def simulate_clicks(rho2: np.ndarray, basis: str, model: DetectionModel, n_shots: int,
                    rng: np.random.Generator, times: PhotonTimes | None = None,
                    first_shot: int = 0) -> list[ClickRecord]:
    """Click stream for ``n_shots`` shots that each carry one photon pair.

    Per photon: analyzer projection, splitter leakage with probability
    ``1/extinction``, and efficiency thinning. Dark counts are Poisson per
    detector and window, uniform inside the window. Arrival times are drawn
    with ``times`` samplers (callables ``rng, n -> array``) or uniformly.
    """
    p = _with_leakage(outcome_probabilities(rho2, basis, model), model.leakage).reshape(-1)
    p = p / p.sum()
    outcome = rng.choice(4, size=n_shots, p=p)
    ports = np.stack([outcome // 2, outcome % 2], axis=1)
    detected = rng.random((n_shots, 2)) < model.detection_efficiency
    samplers = (None, None) if times is None else (times.slot1, times.slot2)
    stamps = np.empty((n_shots, 2))
    for s, (w0, w1) in enumerate(model.windows):
        f = samplers[s]
        stamps[:, s] = rng.uniform(w0, w1, n_shots) if f is None else f(rng, n_shots)
    lam = [model.dark_count_rate * (w1 - w0) for w0, w1 in model.windows]
    clicks = []
    for i in range(n_shots):
        shot = []
        for s in range(2):
            if detected[i, s]:
                shot.append(ClickRecord(first_shot + i, s + 1, DETECTORS[ports[i, s]],
                                        float(stamps[i, s])))
            if lam[s] > 0:
                w0, w1 = model.windows[s]
                for d in DETECTORS:
                    for _ in range(rng.poisson(lam[s])):
                        shot.append(ClickRecord(first_shot + i, s + 1, d,
                                                float(rng.uniform(w0, w1))))
        shot.sort(key=lambda c: (c.timestamp_us, c.slot, c.detector))
        clicks.extend(shot)
    return clicks


@dataclass
class PostSelection:
    events: list = field(default_factory=list)  # (shot, detector1, detector2)
    tallies: dict = field(default_factory=dict)


REJECTION_REASONS = ("outside_window", "missing_photon", "double_click")


def post_select(clicks: Sequence[ClickRecord], model: DetectionModel) -> PostSelection:
    """Keep shots with exactly one click inside each photon window.

    Shots are identified by their shot index; the tallies count rejected
    shots by the first failing rule (a click outside both windows, a slot
    with no click, or a slot with several clicks).
    """
    by_shot: dict[int, list] = {}
    for c in clicks:
        by_shot.setdefault(c.shot, []).append(c)
    out = PostSelection(tallies={"accepted": 0, **{r: 0 for r in REJECTION_REASONS}})
    for shot in sorted(by_shot):
        cs = by_shot[shot]
        slots: dict[int, list] = {1: [], 2: []}
        outside = False
        for c in cs:
            hit = [k + 1 for k, (w0, w1) in enumerate(model.windows)
                   if w0 <= c.timestamp_us < w1]
            if not hit:
                outside = True
            else:
                slots[hit[0]].append(c)
        if outside:
            reason = "outside_window"
        elif not slots[1] or not slots[2]:
            reason = "missing_photon"
        elif len(slots[1]) > 1 or len(slots[2]) > 1:
            reason = "double_click"
        else:
            out.events.append((shot, slots[1][0].detector, slots[2][0].detector))
            out.tallies["accepted"] += 1
            continue
        out.tallies[reason] += 1
    return out


def count_events(events, basis: str) -> CorrelationCounts:
    c = CorrelationCounts(basis)
    for _, d1, d2 in events:
        key = {("T", "T"): "n_pp", ("T", "R"): "n_pm", ("R", "T"): "n_mp", ("R", "R"): "n_mm"}
        setattr(c, key[(d1, d2)], getattr(c, key[(d1, d2)]) + 1)
    return c


def detect(source, basis: str, model: DetectionModel, seed: int | None = None,
           n_shots: int = 0, times: PhotonTimes | None = None) -> CorrelationCounts:
    """Correlation counts from a two-photon state (sampled) or a click stream."""
    if isinstance(source, np.ndarray) and source.shape == (4, 4):
        rng = np.random.default_rng(seed)
        clicks = simulate_clicks(source, basis, model, n_shots, rng, times)
    else:
        clicks = list(source)
    return count_events(post_select(clicks, model).events, basis)


def correlation_expectation(counts: CorrelationCounts) -> tuple[float, float]:
    """Correlator ``(n_pp + n_mm - n_pm - n_mp)/N`` and its binomial standard error."""
    n = counts.total
    if n == 0:
        raise ValueError("no events in this basis")
    e = (counts.n_pp + counts.n_mm - counts.n_pm - counts.n_mp) / n
    return e, math.sqrt(max(1 - e * e, 0.0) / n)


def bootstrap_expectation(events, basis: str, n_boot: int, seed: int) -> float:
    """Bootstrap standard error of the correlator, resampling accepted shots."""
    signs = np.array([1 if d1 == d2 else -1 for _, d1, d2 in events])
    if signs.size == 0:
        raise ValueError("no events in this basis")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, signs.size, size=(n_boot, signs.size))
    return float(np.std(signs[idx].mean(axis=1), ddof=1))


def bell_fidelity(exx, eyy, ezz, target: str = "psi-") -> tuple[float, float]:
    """Fidelity witness ``1/4 (1 +- XX +- YY - ZZ)`` for Psi+ / Psi-.

    Each argument is a value or a ``(value, error)`` pair; errors add in
    quadrature.
    """
    vals, errs = [], []
    for x in (exx, eyy, ezz):
        v, e = (x if isinstance(x, (tuple, list)) else (x, 0.0))
        if not -1 - 1e-12 <= v <= 1 + 1e-12:
            raise ValueError(f"expectation value {v} outside [-1, 1]")
        vals.append(float(v))
        errs.append(float(e))
    t = target.lower().replace("ψ", "psi").replace("_", "")
    if t in ("psi+", "psiplus", "+"):
        s = 1.0
    elif t in ("psi-", "psiminus", "-"):
        s = -1.0
    else:
        raise ValueError(f"unknown target {target!r}")
    f = 0.25 * (1 + s * vals[0] + s * vals[1] - vals[2])
    return f, 0.25 * math.sqrt(sum(e * e for e in errs))


def pauli_expectation(rho2: np.ndarray, basis: str) -> float:
    """Exact two-photon correlator in ``basis`` (ideal analyzer)."""
    p = outcome_probabilities(rho2, basis, DetectionModel.ideal())
    return float(p[0, 0] + p[1, 1] - p[0, 1] - p[1, 0])


def counts_to_json(counts: Sequence[CorrelationCounts]) -> str:
    return json.dumps([c.to_json() for c in counts], sort_keys=True)

