"""The photon-pair sequence: initialization, two bichromatic Raman stages,
and extraction of the two-photon polarization state.

Stage 1 (850 nm) starts from ``D3/2(m=-1/2)``. Tone ``a`` drives the Raman
path to ``D = D5/2(m=-5/2)`` and emits sigma+, tone ``b`` the path to
``D' = D5/2(m=+3/2)`` and emits sigma-, leaving the ion entangled with
photon 1. Stage 2 (854 nm) maps both ``D`` and ``D'`` onto the common level
``D5/2(m=-1/2)``, emitting sigma- from ``D`` and sigma+ from ``D'``. Photon
2 then carries the ion's qubit, and the pair ends up in
``(|sigma+ sigma-> + e^{i phi} |sigma- sigma+>)/sqrt2``.

The P manifolds are adiabatically eliminated (see :mod:`.effective`) and
each stage is restricted to the states that matter for it. Both photons
are resolved exactly by conditioning on the monitored cavity channels:

* stage 1 is propagated with :func:`~.dynamics.propagate_conditional`,
  keeping the ion state after one emission as four (p, q) coherence
  blocks,
* stage 2 evolves these blocks and integrates the second emission with
  :func:`~.dynamics.propagate_emission`.

Light shifts. The two tones of a drive are locked to one another by the
bare Zeeman splittings, so they share one detuning from the light-shifted
two-photon resonance. With ``stark_asymmetry`` on, this common detuning
cancels the mean light shift at the pulse peak, and the remaining
differential shift shows up as a time-dependent phase. With it off, every
light shift of the drive's lower manifold is cancelled exactly by a
compensating diagonal term.
"""
from __future__ import annotations

import math
import threading
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from . import atomic
from .atomic import Level, Term
from .dynamics import (TWO_PI, BichromaticDrive, CollapseChannel, ConfigurationError,
                       Coefficient, DriveTone, DrivenTerm, Envelope, HilbertSpace, Problem,
                       SystemParams, TrajectoryEngine, build_problem, flow_graph,
                       propagate_conditional, propagate_emission, reachable,
                       resonant_frame, restrict)
from .effective import eliminate
from .tomography import DETECTORS, ClickRecord, DetectionModel

MONITORED = ("cavity_sigma+", "cavity_sigma-")
POLARIZATIONS = ("sigma+", "sigma-")

INITIAL_LEVEL = atomic.level("D3/2", -0.5)
D_LEVEL = atomic.level("D5/2", -2.5)
DP_LEVEL = atomic.level("D5/2", 1.5)
FINAL_LEVEL = atomic.level("D5/2", -0.5)

PHOTON_SEPARATION = 6.0
DEFAULT_CUTOFF = TWO_PI * 5.0


class CalibrationError(RuntimeError):
    pass


class LowEfficiencyWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class Initialize:
    """Reset to ``target`` with probability ``fidelity`` (cooling, pumping, transfer)."""

    target: Level = INITIAL_LEVEL
    fidelity: float = 1.0

    def __post_init__(self):
        if not 0 <= self.fidelity <= 1:
            raise ValueError("fidelity must lie in [0, 1]")


@dataclass(frozen=True)
class BichromaticPhotonGeneration:
    """One photon-generation stage; ``window`` (us) is the time the stage occupies.

    The drive envelope's ``start`` is relative to the start of the stage.
    """

    drive: BichromaticDrive
    window: float

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("window must be positive")
        if self.drive.envelope.end > self.window + 1e-12:
            raise ValueError("drive envelope must end inside the window")


@dataclass(frozen=True)
class Wait:
    duration: float

    def __post_init__(self):
        if not self.duration >= 0:
            raise ValueError("wait duration must be >= 0")


@dataclass(frozen=True)
class ErrorToggles:
    """Switchable error mechanisms.

    ``zeeman_mismatch`` (rad/us) is the error of the assumed energy of the
    ``mismatch_level`` (D'), which leaves the two photon pairs differing in
    energy by that amount. With ``zeeman_model='dephasing'`` the pair-state
    branch coherence is averaged over the simulated pair-delay distribution
    (the compensable mean phase removed). With ``'detuning'`` the drive
    tones of the D' paths are detuned instead and the dynamics decide; the
    cavity then filters the off-resonant photons and the dephasing is
    weaker. ``drift`` applies a lumped branch dephasing that costs
    ``drift_infidelity`` of Bell fidelity.
    """

    zeeman_mismatch: float = 0.0
    stark_asymmetry: bool = True
    drift: bool = False
    drift_infidelity: float = 0.01
    zeeman_model: str = "dephasing"

    def __post_init__(self):
        if not 0 <= self.drift_infidelity <= 0.5:
            raise ValueError("drift infidelity must lie in [0, 0.5]")
        if self.zeeman_model not in ("dephasing", "detuning"):
            raise ValueError(f"unknown zeeman model {self.zeeman_model!r}")

    @property
    def tone_mismatch(self) -> float:
        """Mismatch applied to the drive tones (zero in the dephasing model)."""
        return self.zeeman_mismatch if self.zeeman_model == "detuning" else 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    params: SystemParams = field(default_factory=SystemParams)
    steps: tuple = ()
    detection: DetectionModel = field(default_factory=DetectionModel)
    toggles: ErrorToggles = field(default_factory=ErrorToggles)
    n_max: int = 1
    tolerance: float = 1e-7
    secular_cutoff: float | None = DEFAULT_CUTOFF
    mismatch_level: Level = DP_LEVEL
    error_population: str = "neighbors"
    efficiency_floor: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        for s in self.steps:
            if not isinstance(s, (Initialize, BichromaticPhotonGeneration, Wait)):
                raise ConfigurationError(f"unknown sequence step {s!r}")
        if self.error_population not in ("neighbors", "manifold"):
            raise ConfigurationError(f"unknown error population {self.error_population!r}")

    def replace(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    @property
    def space(self) -> HilbertSpace:
        return HilbertSpace(self.n_max)

    @property
    def generation_steps(self) -> list[int]:
        return [i for i, s in enumerate(self.steps) if isinstance(s, BichromaticPhotonGeneration)]

    def stage(self, stage: int) -> BichromaticPhotonGeneration:
        gens = self.generation_steps
        if not 1 <= stage <= len(gens):
            raise ConfigurationError(f"no generation stage {stage}")
        return self.steps[gens[stage - 1]]

    def with_stage(self, stage: int, **kw) -> "ExperimentConfig":
        """Copy with generation stage ``stage`` (1-based) modified."""
        i = self.generation_steps[stage - 1]
        steps = list(self.steps)
        steps[i] = replace(steps[i], **kw)
        return self.replace(steps=tuple(steps))

    def with_drive(self, stage: int, drive: BichromaticDrive) -> "ExperimentConfig":
        return self.with_stage(stage, drive=drive)

    def scaled(self, stage: int, scale: float) -> "ExperimentConfig":
        """Both tones of ``stage`` scaled by ``scale`` (ratio kept)."""
        return self.with_drive(stage, self.stage(stage).drive.scaled(scale))

    def with_phase(self, stage: int, tone: str, phase: float) -> "ExperimentConfig":
        d = self.stage(stage).drive
        key = "tone_" + tone
        return self.with_drive(stage, d.replace(**{key: getattr(d, key).replace(phase=phase)}))

    def drives_off(self) -> "ExperimentConfig":
        cfg = self
        for k in range(1, len(self.generation_steps) + 1):
            cfg = cfg.scaled(k, 0.0)
        return cfg


def stage1_drive(rabi: float, ratio: float = 1.0, envelope: Envelope | None = None,
                 phase_b: float = 0.0) -> BichromaticDrive:
    env = envelope or Envelope(1.0, 1 / 3)
    ta = DriveTone(Term.D3_2, Term.P3_2, -1, rabi, INITIAL_LEVEL, D_LEVEL)
    tb = DriveTone(Term.D3_2, Term.P3_2, +1, rabi * ratio, INITIAL_LEVEL, DP_LEVEL, phase=phase_b)
    return BichromaticDrive(ta, tb, env)


def stage2_drive(rabi: float, ratio: float = 1.0, envelope: Envelope | None = None,
                 phase_b: float = 0.0) -> BichromaticDrive:
    env = envelope or Envelope(1.0, 1 / 3)
    ta = DriveTone(Term.D5_2, Term.P3_2, +1, rabi, D_LEVEL, FINAL_LEVEL)
    tb = DriveTone(Term.D5_2, Term.P3_2, -1, rabi * ratio, DP_LEVEL, FINAL_LEVEL, phase=phase_b)
    return BichromaticDrive(ta, tb, env)


def protocol_config(cavity_detuning_mhz: float = -60.0, stage1_rabi_mhz: float = 30.0,
                    stage2_rabi_mhz: float = 17.0, duration: float = 1.0,
                    rise_time: float = 1 / 3, window: float = 3.0,
                    separation: float = PHOTON_SEPARATION, init_fidelity: float = 1.0,
                    stage1_ratio: float = 0.74, stage2_ratio: float = 0.92,
                    toggles: ErrorToggles | None = None,
                    detection: DetectionModel | None = None, **kw) -> ExperimentConfig:
    """The two-stage protocol with model-choice defaults (uncalibrated ratios)."""
    params = SystemParams.from_mhz(cavity_detuning_mhz_over_2pi=cavity_detuning_mhz)
    env = Envelope(duration, rise_time)
    steps = (
        Initialize(INITIAL_LEVEL, init_fidelity),
        BichromaticPhotonGeneration(stage1_drive(TWO_PI * stage1_rabi_mhz, stage1_ratio, env),
                                    window),
        Wait(separation - window),
        BichromaticPhotonGeneration(stage2_drive(TWO_PI * stage2_rabi_mhz, stage2_ratio, env),
                                    window),
    )
    if detection is None:
        detection = DetectionModel(windows=((0.0, window), (separation, separation + window)))
    return ExperimentConfig(params, steps, detection, toggles or ErrorToggles(), **kw)


@dataclass(frozen=True)
class StageTiming:
    stage: int
    start: float
    end: float
    drive: BichromaticDrive  # envelope in absolute time


def timeline(config: ExperimentConfig) -> list[StageTiming]:
    """Absolute timing of the generation stages (t = 0 at the first stage)."""
    t, out, seen_gen = 0.0, [], False
    for s in config.steps:
        if isinstance(s, Initialize):
            if seen_gen:
                raise ConfigurationError("initialization must precede photon generation")
        elif isinstance(s, Wait):
            t += s.duration
        else:
            seen_gen = True
            env = s.drive.envelope
            drive = s.drive.replace(envelope=env.shifted(t + env.start))
            out.append(StageTiming(len(out) + 1, t, t + s.window, drive))
            t += s.window
    return out


# ---------------------------------------------------------------------------
# Initialization


def _error_levels(target: Level, policy: str) -> list[Level]:
    same = [lv for lv in atomic.manifold(target.term) if lv != target]
    if policy == "manifold":
        return same
    return [lv for lv in same if abs(lv.m_j - target.m_j) == 1]


def initial_populations(config: ExperimentConfig) -> dict:
    """Atomic level -> probability after the initialization steps."""
    inits = [s for s in config.steps if isinstance(s, Initialize)]
    if not inits:
        raise ConfigurationError("sequence has no Initialize step")
    step = inits[-1]
    pops = {step.target: step.fidelity}
    err = _error_levels(step.target, config.error_population)
    if step.fidelity < 1:
        if not err:
            raise ConfigurationError(f"no error levels next to {step.target}")
        for lv in err:
            pops[lv] = (1 - step.fidelity) / len(err)
    return pops


def run_initialization(config: ExperimentConfig) -> np.ndarray:
    """Diagonal density matrix of the full ion-cavity space, cavity empty.

    The last Initialize step wins: the target gets ``fidelity`` and the rest
    is shared equally by the error levels (Zeeman neighbours of the target
    by default, the whole manifold with ``error_population='manifold'``).
    """
    space = config.space
    rho = np.zeros((space.dim, space.dim), dtype=complex)
    for lv, p in initial_populations(config).items():
        i = space.index(lv.index)
        rho[i, i] = p
    return rho


# ---------------------------------------------------------------------------
# Stage models


def excited_mask(space: HilbertSpace) -> np.ndarray:
    return np.array([atomic.LEVELS[i // space.cavity_dim].term in (Term.P1_2, Term.P3_2)
                     for i in range(space.dim)])


def photon_mask(space: HilbertSpace) -> np.ndarray:
    return np.array([(i % space.cavity_dim) > 0 for i in range(space.dim)])


def _term_mask(space: HilbertSpace, term: Term) -> np.ndarray:
    return np.array([atomic.LEVELS[i // space.cavity_dim].term is term
                     for i in range(space.dim)])


def light_shifts(space: HilbertSpace, params: SystemParams, drive: BichromaticDrive) -> np.ndarray:
    """Drive-induced energy shift of every basis state per unit envelope squared.

    Evaluated at the envelope peak from the effective model; zero on the
    eliminated states.
    """
    d0 = drive.replace(tone_a=drive.tone_a.replace(detuning=0.0),
                       tone_b=drive.tone_b.replace(detuning=0.0))
    ep, G = eliminate(build_problem(space, params, [d0]), excited_mask(space))
    env = drive.envelope
    t = env.start + env.duration / 2
    e2 = env(t) ** 2
    s = np.zeros(space.dim)
    if e2 == 0:
        return s
    for term in ep.terms:
        if term.frequency == 0 and term.slow is not None:
            s[G] += 2 * (term.coefficient(t) * term.operator.diagonal()).real
    return s / e2


def _tone_pol(tone: DriveTone) -> int:
    """Cavity polarization of the photon emitted along the tone's Raman path."""
    m_upper = tone.raman_initial.m_j + int(tone.polarization)
    return int(m_upper - tone.raman_final.m_j)


def tuned_drive(config: ExperimentConfig, timing: StageTiming):
    """Drive with light-shift and mismatch detunings applied, plus extra terms."""
    space, params, tog = config.space, config.params, config.toggles
    drive = timing.drive
    if all(t.rabi == 0 for t in drive.tones):
        return drive, []
    s = light_shifts(space, params, drive)
    extra = []
    if tog.stark_asymmetry:
        det = float(np.mean([s[space.index(t.raman_final.index)]
                             - s[space.index(t.raman_initial.index)] for t in drive.tones]))
    else:
        det = 0.0
        lower = _term_mask(space, drive.tone_a.lower) | _term_mask(space, drive.tone_b.lower)
        env = drive.envelope
        comp = sp.diags(-np.where(lower, s, 0.0) / 2).tocsr()
        extra.append(DrivenTerm(comp, Coefficient(1.0, (env, env)), 0.0, "light_shift_comp",
                                0.0))
    tones = []
    for t in drive.tones:
        d = det
        if t.raman_final == config.mismatch_level:
            d -= tog.tone_mismatch
        if t.raman_initial == config.mismatch_level:
            d += tog.tone_mismatch
        tones.append(t.replace(detuning=t.detuning + d))
    return drive.replace(tone_a=tones[0], tone_b=tones[1]), extra


def max_step(config: ExperimentConfig) -> float:
    """Step bound that keeps the integrator from stepping over a pulse."""
    spans = []
    for tm in timeline(config):
        env = tm.drive.envelope
        spans.append(env.duration if env.shape == "sin2" or env.rise_time == 0
                     else env.rise_time)
    return max(min(spans, default=1.0) / 4, 1e-3)


class _Cache:
    """Small thread-safe LRU memo for stage models and stage-1 results."""

    def __init__(self, size: int = 48):
        self.size, self.data = size, OrderedDict()
        self.lock = threading.Lock()

    def get(self, key, make):
        with self.lock:
            if key in self.data:
                self.data.move_to_end(key)
                return self.data[key]
        val = make()
        with self.lock:
            self.data[key] = val
            if len(self.data) > self.size:
                self.data.popitem(last=False)
        return val


_models = _Cache()


def _model_key(config: ExperimentConfig, timing: StageTiming):
    return repr((config.params, config.n_max, timing.drive, config.toggles.tone_mismatch,
                 config.toggles.stark_asymmetry, config.mismatch_level))


def stage_model(config: ExperimentConfig, stage: int):
    """Effective (P-eliminated) problem of one stage and its ground indices."""
    timing = timeline(config)[stage - 1]

    def make():
        drive, extra = tuned_drive(config, timing)
        prob = build_problem(config.space, config.params, [drive], extra_terms=extra)
        return eliminate(prob, excited_mask(config.space))

    return _models.get(_model_key(config, timing), make)


def _support(blocks, tol: float = 1e-14) -> np.ndarray:
    s = sum(np.abs(b) for b in blocks)
    scale = max(float(s.max(initial=0.0)), 1e-300)
    return np.nonzero(np.any(s > tol * scale, axis=0) | np.any(s > tol * scale, axis=1))[0]


def _reduce(problem: Problem, start, targets):
    """States reachable from ``start`` that lead to ``targets``, plus the
    states a monitored emission lands in (so emissions stay resolved)."""
    g = flow_graph(problem)
    keep = np.intersect1d(reachable(g, start), reachable(g, targets, reverse=True))
    landed = [keep]
    for c in problem.channels:
        if c.label in MONITORED:
            m = sp.csr_matrix(c.operator)[:, keep]
            landed.append(np.unique(m.nonzero()[0]))
    return np.unique(np.concatenate(landed)).astype(int)


# ---------------------------------------------------------------------------
# Conditional two-photon state


@dataclass
class IonPhotonState:
    """Ion-photon state after photon 1, over ``{D, D'} x {sigma+, sigma-}``.

    Index ``2*a + p`` with ``a = 0`` for D, ``1`` for D' and ``p = 0`` for
    sigma+. ``leakage`` is the probability of ion states outside the qubit.
    """

    rho: np.ndarray
    leakage: float
    probability: float


@dataclass
class TwoPhotonPolarizationState:
    """Normalized photon-pair density matrix over ``{sigma+, sigma-}^2``.

    Index ``2*p1 + p2`` with 0 = sigma+, 1 = sigma-. ``efficiency`` is the
    probability of a photon pair per attempt; ``rho`` is None when no pair
    is ever produced.
    """

    rho: np.ndarray | None
    efficiency: float
    stage_efficiencies: tuple = ()
    double_emission: float = 0.0
    ion_photon: IonPhotonState | None = None

    def fidelity(self, target: str = "psi+") -> float:
        if self.rho is None:
            return float("nan")
        s = 1 if target.lower() in ("psi+", "+") else -1
        v = np.array([0, 1, s, 0]) / math.sqrt(2)
        return float(np.real(v @ self.rho @ v))

    def best_bell_fidelity(self) -> float:
        """Fidelity with the closest ``(|+-> + e^{i theta}|-+>)/sqrt2``."""
        if self.rho is None:
            return float("nan")
        r = self.rho
        return float(0.5 * (r[1, 1] + r[2, 2]).real + abs(r[1, 2]))

    def coherence_phase(self) -> float:
        """``theta`` of the closest Bell state (the aggregate superposition phase)."""
        return float(np.angle(self.rho[2, 1])) if self.rho is not None else float("nan")


@dataclass
class StageOneResult:
    emitted: dict           # (p, q) -> ground-space block after one emission
    probability: float      # photon-1 probability
    second: float           # probability of a further emission in the window
    G: np.ndarray
    n_steps: int


_stage1_cache = _Cache(16)


def clear_caches() -> None:
    """Drop memoized stage models and stage-1 results."""
    for c in (_models, _stage1_cache):
        with c.lock:
            c.data.clear()


def run_stage_one(config: ExperimentConfig) -> StageOneResult:
    """Stage 1 resolved on one photon emission, ion state kept per (p, q)."""
    timings = timeline(config)
    if len(timings) < 1:
        raise ConfigurationError("no photon generation stage")
    tm = timings[0]
    key = repr((_model_key(config, tm), tm.start, tm.end, initial_populations(config),
                config.tolerance, config.secular_cutoff, len(timings)))

    def make():
        space = config.space
        ep, G = stage_model(config, 1)
        rho0 = run_initialization(config)[np.ix_(G, G)]
        start = np.nonzero(np.abs(np.diag(rho0)) > 0)[0]
        targets = photon_mask(space)[G]
        if len(timings) > 1:
            nxt = timings[1].drive.tone_a.lower
            targets |= _term_mask(space, nxt)[G]
        keep = _reduce(ep, start, np.nonzero(targets)[0])
        p = restrict(ep, keep)
        seeds = np.searchsorted(keep, start)
        frame = resonant_frame(p, seeds, 0.5)
        res = propagate_conditional(p, [rho0[np.ix_(keep, keep)]], MONITORED, tm.start,
                                    tm.end, frame, config.secular_cutoff, config.tolerance,
                                    max_step(config))
        emitted = {}
        n = len(G)
        for k, blocks in res.emitted.items():
            full = np.zeros((n, n), dtype=complex)
            full[np.ix_(keep, keep)] = blocks[0]
            emitted[k] = full
        prob = float(sum(np.trace(emitted[(m, m)]).real for m in MONITORED))
        return StageOneResult(emitted, prob, float(res.second[0]), G, res.n_steps)

    return _stage1_cache.get(key, make)


def ion_photon_state(config: ExperimentConfig) -> IonPhotonState:
    r1 = run_stage_one(config)
    space = config.space
    pos = {g: i for i, g in enumerate(r1.G)}
    qa = [pos[space.index(D_LEVEL.index)], pos[space.index(DP_LEVEL.index)]]
    rho = np.zeros((4, 4), dtype=complex)
    for p, lp in enumerate(MONITORED):
        for q, lq in enumerate(MONITORED):
            blk = r1.emitted[(lp, lq)]
            for a in range(2):
                for b in range(2):
                    rho[2 * a + p, 2 * b + q] = blk[qa[a], qa[b]]
    if r1.probability <= 0:
        return IonPhotonState(rho, 1.0, 0.0)
    rho /= r1.probability
    return IonPhotonState(rho, float(1 - np.trace(rho).real), r1.probability)


def _stage_two_emission(config: ExperimentConfig, blocks, t_eval=None):
    """Stage-2 emission integrals for ground-space ``blocks``."""
    timings = timeline(config)
    if len(timings) < 2:
        raise ConfigurationError("the protocol needs two photon generation stages")
    space = config.space
    ep, G = stage_model(config, 2)
    sup = _support(blocks)
    targets = np.nonzero(photon_mask(space)[G])[0]
    keep = _reduce(ep, sup, targets) if sup.size else np.zeros(0, dtype=int)
    if keep.size == 0:
        return None, keep
    p = restrict(ep, keep)
    seeds = np.searchsorted(keep, np.intersect1d(sup, keep))
    frame = resonant_frame(p, seeds, 0.5)
    res = propagate_emission(p, [b[np.ix_(keep, keep)] for b in blocks], MONITORED,
                             timings[0].end, timings[1].end, frame, config.secular_cutoff,
                             config.tolerance, t_eval, max_step(config))
    return res, keep


def _dephase_branches(rho: np.ndarray, factor: float) -> np.ndarray:
    """Scale coherences between the two photon-1 branches by ``factor``."""
    out = rho.copy()
    for i in range(4):
        for j in range(4):
            if (i >> 1) != (j >> 1):
                out[i, j] *= factor
    return out


def zeeman_dephasing_factor(config: ExperimentConfig) -> float:
    """Branch-coherence factor ``int P(tau) cos(delta tau)`` of the dephasing model.

    One for zero mismatch or for the detuning model, where the dynamics
    carry the mismatch themselves.
    """
    tog = config.toggles
    if tog.zeeman_model != "dephasing" or tog.zeeman_mismatch == 0:
        return 1.0
    return delay_distribution(config).mean_cos(tog.zeeman_mismatch)


def conditional_two_photon_state(config: ExperimentConfig) -> TwoPhotonPolarizationState:
    """Photon-pair state from the time-ordered two-emission decomposition.

    Entry ``((p, q), (p', q'))`` is the integrated stage-2 emission
    coherence ``(q, q')`` of the ion block left by the stage-1 emission
    coherence ``(p, p')``.
    """
    r1 = run_stage_one(config)
    keys = [(p, q) for p in MONITORED for q in MONITORED]
    blocks = [r1.emitted[k] for k in keys]
    res, _ = _stage_two_emission(config, blocks)
    rho2 = np.zeros((4, 4), dtype=complex)
    if res is not None:
        for k, (p, pp) in enumerate(keys):
            i, ip = MONITORED.index(p), MONITORED.index(pp)
            for q, lq in enumerate(MONITORED):
                for qq, lqq in enumerate(MONITORED):
                    rho2[2 * i + q, 2 * ip + qq] = res.integrals[(lq, lqq)][k]
    rho2 = 0.5 * (rho2 + rho2.conj().T)
    eff = float(np.trace(rho2).real)
    if eff < config.efficiency_floor:
        warnings.warn(f"photon-pair efficiency {eff:.3g} below floor "
                      f"{config.efficiency_floor:.3g}", LowEfficiencyWarning, stacklevel=2)
    rho = rho2 / eff if eff > 0 else None
    if rho is not None:
        factor = zeeman_dephasing_factor(config)
        if config.toggles.drift:
            factor *= 1 - 2 * config.toggles.drift_infidelity
        if factor != 1.0:
            rho = _dephase_branches(rho, factor)
    p1 = r1.probability
    second = r1.second / p1 if p1 > 0 else 0.0
    return TwoPhotonPolarizationState(rho, eff, (p1, eff / p1 if p1 > 0 else 0.0), second,
                                      ion_photon_state(config))


# ---------------------------------------------------------------------------
# Balance calibration


def _stage_emissions(config: ExperimentConfig, stage: int):
    """Emission probabilities (tone a polarization, tone b polarization) of ``stage``.

    Stage 1 starts from the initialized state. Later stages start from an
    equal mixture of the two Raman initial levels (the heralded ion after a
    balanced earlier stage); every emitted photon counts, including the
    weak off-path ones, so the balance is that of the photon itself.
    """
    space = config.space
    drive = config.stage(stage).drive
    ep, G = stage_model(config, stage)
    pos = {g: i for i, g in enumerate(G)}
    pols = [MONITORED[0] if _tone_pol(t) == 1 else MONITORED[1] for t in drive.tones]
    if stage == 1:
        rho0 = run_initialization(config)[np.ix_(G, G)]
        tm = timeline(config)[0]
        t0, t1 = tm.start, tm.end
    else:
        rho0 = np.zeros((len(G), len(G)), dtype=complex)
        for t in drive.tones:
            i = pos[space.index(t.raman_initial.index)]
            rho0[i, i] += 0.5
        tms = timeline(config)
        t0, t1 = tms[stage - 2].end, tms[stage - 1].end
    sup = _support([rho0])
    keep = _reduce(ep, sup, np.nonzero(photon_mask(space)[G])[0])
    p = restrict(ep, keep)
    frame = resonant_frame(p, np.searchsorted(keep, np.intersect1d(sup, keep)), 0.5)
    res = propagate_emission(p, [rho0[np.ix_(keep, keep)]], MONITORED, t0, t1,
                             frame, config.secular_cutoff, config.tolerance,
                             max_step=max_step(config))
    return [float(res.integrals[(pol, pol)][0].real) for pol in pols]


def balance_imbalance(config: ExperimentConfig, stage: int) -> float:
    """``(P_a - P_b) / (P_a + P_b)`` of the two Raman paths of ``stage``."""
    pa, pb = _stage_emissions(config, stage)
    if pa + pb <= 0:
        raise CalibrationError(f"stage {stage} emits no photons")
    return (pa - pb) / (pa + pb)


def calibrate_balance(config: ExperimentConfig, stage: int, tolerance: float = 1e-3,
                      max_iter: int = 40) -> BichromaticDrive:
    """Tone-b Rabi frequency equalizing the two polarizations of ``stage``.

    Brent's method on the ratio ``rabi_b / rabi_a`` (tone a fixed). The
    relative imbalance ``|P_a - P_b| / (P_a + P_b)`` ends below
    ``tolerance``.
    """
    drive = config.stage(stage).drive
    ra = drive.tone_a.rabi
    if ra <= 0:
        raise CalibrationError(f"stage {stage} tone a is off")
    x0 = drive.tone_b.rabi / ra if drive.tone_b.rabi > 0 else 1.0

    def at(ratio):
        return config.with_drive(stage, drive.replace(
            tone_b=drive.tone_b.replace(rabi=ra * ratio)))

    cache = {}

    def f(ratio):
        if ratio not in cache:
            cache[ratio] = balance_imbalance(at(ratio), stage)
        return cache[ratio]

    lo, hi = x0 / 1.25, x0 * 1.25
    flo, fhi = f(lo), f(hi)
    n = 0
    while flo * fhi > 0:
        n += 1
        if n > max_iter:
            raise CalibrationError(
                f"stage {stage}: no sign change of the imbalance between ratios "
                f"{lo:.4g} ({flo:.3g}) and {hi:.4g} ({fhi:.3g})")
        if abs(flo) < abs(fhi):
            lo, flo = lo / 1.5, f(lo / 1.5)
        else:
            hi, fhi = hi * 1.5, f(hi * 1.5)
    ratio = brentq(f, lo, hi, xtol=1e-9, rtol=1e-12, maxiter=max_iter)
    if abs(f(ratio)) >= tolerance:
        raise CalibrationError(f"stage {stage}: residual imbalance {f(ratio):.3g}")
    return drive.replace(tone_b=drive.tone_b.replace(rabi=ra * ratio))


def calibrate(config: ExperimentConfig, stages: Sequence[int] | None = None) -> ExperimentConfig:
    """Balance every generation stage in order."""
    cfg = config
    n = len(config.generation_steps)
    for k in (stages or range(1, n + 1)):
        if all(t.rabi == 0 for t in cfg.stage(k).drive.tones):
            continue
        cfg = cfg.with_drive(k, calibrate_balance(cfg, k))
    return cfg



BELL_PHASES = {"psi+": 0.0, "psi-": math.pi}


def calibrate_phase(config: ExperimentConfig, target: str = "psi+", stage: int = 2,
                    tone: str = "b") -> ExperimentConfig:
    """Set one tone phase so the pair lands on ``target`` (psi+ or psi-).

    The superposition phase follows a tone phase with slope +1 or -1
    depending on the tone and stage; both are measured, not assumed.
    """
    if target not in BELL_PHASES:
        raise ConfigurationError(f"unknown Bell target {target!r}")
    d = config.stage(stage).drive
    p0 = (d.tone_a if tone == "a" else d.tone_b).phase
    th0 = conditional_two_photon_state(config).coherence_phase()
    th1 = conditional_two_photon_state(config.with_phase(stage, tone, p0 + math.pi / 2)
                                       ).coherence_phase()
    if not (math.isfinite(th0) and math.isfinite(th1)):
        raise CalibrationError("no photon pairs to lock the phase on")
    slope = 1.0 if math.sin(th1 - th0) > 0 else -1.0
    p = p0 + slope * (BELL_PHASES[target] - th0)
    return config.with_phase(stage, tone, float(math.remainder(p, 2 * math.pi)))


# ---------------------------------------------------------------------------
# Photon shapes


@dataclass
class PhotonShape:
    """Emission density (1/us) per polarization on a uniform time grid.

    The densities are scaled so the area over both polarizations is 1;
    ``probability`` is the unscaled emission probability of the photon.
    """

    stage: int
    times: np.ndarray
    density: dict
    probability: float

    def area(self, pol: str) -> float:
        return float(np.trapezoid(self.density[pol], self.times))

    def total(self) -> np.ndarray:
        return sum(self.density[p] for p in POLARIZATIONS)

    def mean_and_std(self) -> tuple[float, float]:
        f = self.total()
        a = np.trapezoid(f, self.times)
        if a <= 0:
            return float("nan"), float("nan")
        m = np.trapezoid(f * self.times, self.times) / a
        v = np.trapezoid(f * (self.times - m) ** 2, self.times) / a
        return float(m), float(math.sqrt(max(v, 0.0)))


def photon_shape(config: ExperimentConfig, stage: int, n_points: int = 601) -> PhotonShape:
    """Temporal emission density of photon ``stage`` given the photons before it."""
    space = config.space
    timings = timeline(config)
    tm = timings[stage - 1]
    grid = np.linspace(tm.start if stage == 1 else timings[stage - 2].end, tm.end, n_points)
    ep, G = stage_model(config, stage)
    if stage == 1:
        blocks = [run_initialization(config)[np.ix_(G, G)]]
        sup = _support(blocks)
        keep = _reduce(ep, sup, np.nonzero(photon_mask(space)[G])[0])
        if keep.size == 0:
            res = None
        else:
            p = restrict(ep, keep)
            frame = resonant_frame(p, np.searchsorted(keep, np.intersect1d(sup, keep)), 0.5)
            res = propagate_emission(p, [blocks[0][np.ix_(keep, keep)]], MONITORED, grid[0],
                                     grid[-1], frame, config.secular_cutoff,
                                     config.tolerance, grid, max_step(config))
    elif stage == 2:
        r1 = run_stage_one(config)
        herald = sum(r1.emitted[(m, m)] for m in MONITORED)
        if r1.probability > 0:
            herald = herald / r1.probability
        res, _ = _stage_two_emission(config, [herald], t_eval=grid)
    else:
        raise ConfigurationError("photon shapes exist for stages 1 and 2")
    dens = {pol: np.zeros(n_points) for pol in POLARIZATIONS}
    prob = 0.0
    if res is not None:
        for pol, lab in zip(POLARIZATIONS, MONITORED):
            dens[pol] = np.clip(res.density[lab][:, 0], 0.0, None)
            prob += float(res.integrals[(lab, lab)][0].real)
    area = sum(np.trapezoid(dens[p], grid) for p in POLARIZATIONS)
    if area > 0:
        dens = {p: d / area for p, d in dens.items()}
    return PhotonShape(stage, grid, dens, prob)


def delay_distribution(config: ExperimentConfig, n_points: int = 601):
    """``P(tau)`` of the mean-centred pair delay from the two photon shapes.

    The photons are emitted independently given the branch, so the delay
    density is the cross-correlation of the two shapes.
    """
    from .phase import DelayDistribution

    s1, s2 = photon_shape(config, 1, n_points), photon_shape(config, 2, n_points)
    f1, f2 = s1.total(), s2.total()
    w1 = f1 * np.gradient(s1.times)
    w2 = f2 * np.gradient(s2.times)
    tau = (s2.times[None, :] - s1.times[:, None]).reshape(-1)
    w = (w1[:, None] * w2[None, :]).reshape(-1)
    if w.sum() <= 0:
        return DelayDistribution.delta()
    w = w / w.sum()
    tau = tau - np.sum(w * tau)
    return DelayDistribution.empirical(tau, w)


def temporal_overlap(s1: PhotonShape, s2: PhotonShape) -> float:
    """``int sqrt(f1 f2) dt`` of the two normalized photon densities."""
    t = np.union1d(s1.times, s2.times)
    f1 = np.interp(t, s1.times, s1.total(), left=0.0, right=0.0)
    f2 = np.interp(t, s2.times, s2.total(), left=0.0, right=0.0)
    return float(np.trapezoid(np.sqrt(f1 * f2), t))


# ---------------------------------------------------------------------------
# Sampled experiment


def _port_channels(problem: Problem, analyzer: np.ndarray) -> Problem:
    """Replace the two cavity channels by detector-port channels.

    ``analyzer`` maps (sigma+, sigma-) amplitudes onto (T, R); the port jump
    operators ``sum_p U[port, p] a_p`` unravel the same master equation.
    """
    chans = {c.label: c for c in problem.channels}
    a = [chans[m] for m in MONITORED]
    rate = a[0].rate
    others = [c for c in problem.channels if c.label not in MONITORED]
    ports = [CollapseChannel(sp.csr_matrix(analyzer[k, 0] * a[0].operator
                                           + analyzer[k, 1] * a[1].operator),
                             rate, "port_" + DETECTORS[k]) for k in range(2)]
    return Problem(problem.h0, problem.terms, ports + others, problem.extra_loss,
                   problem.dynamic_loss)


def sample_experiment(config: ExperimentConfig, n_shots: int, seed: int, basis: str = "Z",
                      batch: int = 1000, first_shot: int = 0) -> list[ClickRecord]:
    """Click stream of ``n_shots`` trajectory shots analysed in ``basis``.

    Each shot draws its initial level, runs one quantum trajectory through
    all stages, and turns port jumps into clicks after splitter leakage and
    efficiency thinning; dark counts are added per window and detector.
    Shot ``i`` uses the ``i``-th child stream of ``seed``; the output is
    deterministic given (config, n_shots, seed, basis, batch).
    """
    if n_shots < 1:
        raise ValueError("n_shots must be >= 1")
    space, model = config.space, config.detection
    timings = timeline(config)
    models = [stage_model(config, k + 1) for k in range(len(timings))]
    G = models[0][1]
    if any(not np.array_equal(G, g) for _, g in models):
        raise ConfigurationError("stages must share one ground space")
    u = model.analyzer(basis)
    probs = [_port_channels(ep, u) for ep, _ in models]
    pos = {g: i for i, g in enumerate(G)}
    pops = initial_populations(config)
    levels = list(pops)
    weights = np.array([pops[lv] for lv in levels])
    start = np.array([pos[space.index(lv.index)] for lv in levels])
    g = flow_graph(probs[0])
    for p in probs[1:]:
        g = g + flow_graph(p)
    keep = reachable(g, start)
    local = np.searchsorted(keep, start)
    reduced = [restrict(p, keep) for p in probs]
    engines = [TrajectoryEngine(p, rtol=config.tolerance * 10, atol=config.tolerance * 1e-1,
                                max_step=max_step(config),
                                frame=resonant_frame(p, local, 0.5),
                                cutoff=config.secular_cutoff) for p in reduced]
    children = np.random.SeedSequence(seed).spawn(first_shot + n_shots)[first_shot:]
    leak = model.leakage
    clicks = []
    for b0 in range(0, n_shots, batch):
        seqs = children[b0:b0 + batch]
        rngs = [np.random.default_rng(s) for s in seqs]
        n = len(rngs)
        psi = np.zeros((len(keep), n), dtype=complex)
        for j, r in enumerate(rngs):
            psi[local[r.choice(len(levels), p=weights)], j] = 1.0
        thresholds = None
        records = [[] for _ in range(n)]
        t_prev = 0.0
        for k, (eng, tm) in enumerate(zip(engines, timings)):
            t_end = tm.end
            psi, rec, thresholds = eng.run(psi, t_prev, t_end, rngs, thresholds)
            for j in range(n):
                records[j].extend((k + 1, ev) for ev in rec[j])
            t_prev = t_end
        for j, r in enumerate(rngs):
            shot = []
            for slot, ev in records[j]:
                if not ev.label.startswith("port_"):
                    continue
                det = DETECTORS.index(ev.label[-1])
                if leak > 0 and r.random() < leak:
                    det = 1 - det
                if r.random() >= model.detection_efficiency:
                    continue
                shot.append(ClickRecord(first_shot + b0 + j, min(slot, 2), DETECTORS[det],
                                        max(ev.time, 0.0)))
            if model.dark_count_rate > 0:
                for s, (w0, w1) in enumerate(model.windows):
                    for d in DETECTORS:
                        for _ in range(r.poisson(model.dark_count_rate * (w1 - w0))):
                            shot.append(ClickRecord(first_shot + b0 + j, s + 1, d,
                                                    float(r.uniform(w0, w1))))
            shot.sort(key=lambda c: (c.timestamp_us, c.slot, c.detector))
            clicks.extend(shot)
    return clicks
