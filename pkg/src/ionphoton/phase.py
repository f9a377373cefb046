"""Phase bookkeeping, dephasing from photon-frequency mismatch, phase-scan fits.

A photon pair whose two photons differ in energy by ``delta`` picks up the
relative phase ``delta * tau``, where ``tau`` is the deviation of the
pair's detection delay from its mean (the mean phase is a fixed offset that
can be calibrated away). Averaging over the delay distribution gives

    eps = 1 - 1/2 int P(tau) (1 + cos(delta tau)) dtau,

which for a gaussian of width ``sigma`` is ``(1 - exp(-delta^2 sigma^2 / 2)) / 2``.

Sign convention: ``delta > 0`` means photon 1 is the higher-energy photon.
The infidelity is even in ``delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate as quad_integrate

TWO_PI = 2 * math.pi


def wrap_phase(x: float) -> float:
    """``x`` wrapped to ``[0, 2 pi)``."""
    r = float(np.mod(x, TWO_PI))
    return 0.0 if r >= TWO_PI else r


@dataclass(frozen=True)
class SuperpositionPhase:
    """Aggregate phase ``phi`` of the two-photon state and drive phase ``phi_m``."""

    phi: float = 0.0
    phi_m: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "phi", wrap_phase(self.phi))
        object.__setattr__(self, "phi_m", wrap_phase(self.phi_m))

    @property
    def total(self) -> float:
        return wrap_phase(self.phi + self.phi_m)

    def shifted(self, d_phi_m: float) -> "SuperpositionPhase":
        return SuperpositionPhase(self.phi, self.phi_m + d_phi_m)


def xx_expectation(phase: SuperpositionPhase) -> float:
    """``<XX> = cos(phi + phi_m)``: +1 for Psi+, -1 for Psi-."""
    return math.cos(phase.phi + phase.phi_m)


class DistributionError(ValueError):
    pass


@dataclass(frozen=True)
class DelayDistribution:
    """Distribution of the pair-delay deviation ``tau`` (us).

    ``kind`` is ``"delta"``, ``"gaussian"`` (width ``sigma``), ``"empirical"``
    (``samples`` with optional ``weights``) or ``"density"`` (a callable on
    ``support``), the last two checked for normalization.
    """

    kind: str
    sigma: float = 0.0
    samples: tuple = ()
    weights: tuple | None = None
    density: object = None
    support: tuple = (-np.inf, np.inf)

    def __post_init__(self):
        if self.kind not in ("delta", "gaussian", "empirical", "density"):
            raise DistributionError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "gaussian" and not self.sigma >= 0:
            raise DistributionError("gaussian width must be >= 0")
        if self.kind == "empirical":
            if len(self.samples) == 0:
                raise DistributionError("empirical distribution needs samples")
            if self.weights is not None:
                w = np.asarray(self.weights, dtype=float)
                if w.shape != (len(self.samples),) or np.any(w < 0):
                    raise DistributionError("weights must be non-negative, one per sample")
                if abs(w.sum() - 1) > 1e-6:
                    raise DistributionError(f"weights sum to {w.sum():.8g}, not 1")
        if self.kind == "density":
            if not callable(self.density):
                raise DistributionError("density must be callable")
            total = quad_integrate.quad(self.density, *self.support, limit=200)[0]
            if abs(total - 1) > 1e-6:
                raise DistributionError(f"density integrates to {total:.8g}, not 1")

    @classmethod
    def delta(cls) -> "DelayDistribution":
        return cls("delta")

    @classmethod
    def gaussian(cls, sigma: float) -> "DelayDistribution":
        return cls("gaussian", sigma=float(sigma))

    @classmethod
    def empirical(cls, samples, weights=None) -> "DelayDistribution":
        return cls("empirical", samples=tuple(float(x) for x in samples),
                   weights=None if weights is None else tuple(float(w) for w in weights))

    def mean_cos(self, delta: float) -> float:
        """``int P(tau) cos(delta tau) dtau``."""
        if self.kind == "delta" or delta == 0:
            return 1.0
        if self.kind == "gaussian":
            if self.sigma == 0:
                return 1.0
            s = self.sigma

            def f(t):
                return math.exp(-0.5 * (t / s) ** 2) * math.cos(delta * t) / (s * math.sqrt(TWO_PI))

            # integrate over +-12 sigma split at the origin
            val = 0.0
            for a, b in ((-12 * s, 0.0), (0.0, 12 * s)):
                val += quad_integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)[0]
            return val
        if self.kind == "empirical":
            x = np.asarray(self.samples)
            w = (np.full(x.size, 1 / x.size) if self.weights is None
                 else np.asarray(self.weights))
            return float(np.sum(w * np.cos(delta * x)))
        return quad_integrate.quad(lambda t: self.density(t) * math.cos(delta * t),
                                   *self.support, limit=400)[0]


def zeeman_mismatch_infidelity(dist: DelayDistribution, delta: float) -> float:
    """``1 - 1/2 int P(tau)(1 + cos(delta tau)) dtau`` for energy mismatch ``delta`` (rad/us)."""
    eps = 0.5 * (1.0 - dist.mean_cos(delta))
    return float(min(max(eps, 0.0), 1.0))


def gaussian_infidelity(sigma: float, delta: float) -> float:
    """Closed form of the gaussian case."""
    return 0.5 * (1.0 - math.exp(-0.5 * (delta * sigma) ** 2))


def delays_from_pairs(arrival_pairs) -> np.ndarray:
    pairs = np.asarray(arrival_pairs, dtype=float)
    if pairs.size == 0:
        raise DistributionError("no arrival pairs")
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("arrival pairs must have shape (n, 2)")
    if pairs.shape[0] < 2:
        raise DistributionError("need at least two arrival pairs")
    tau = pairs[:, 1] - pairs[:, 0]
    return tau - tau.mean()


def infidelity_from_samples(arrival_pairs, delta: float, mode: str = "empirical") -> float:
    """Mismatch infidelity from photon arrival-time pairs ``(t1, t2)``.

    Delays are centred on their mean (the compensable average phase).
    ``mode="gaussian"`` replaces the raw samples by a gaussian of the same
    standard deviation.
    """
    tau = delays_from_pairs(arrival_pairs)
    if mode == "empirical":
        dist = DelayDistribution.empirical(tau)
    elif mode == "gaussian":
        dist = DelayDistribution.gaussian(float(np.std(tau)))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return zeeman_mismatch_infidelity(dist, delta)


@dataclass(frozen=True)
class PhaseScanFit:
    """Least-squares fit of ``A sin(x + phi)``.

    ``phase_identifiable`` is False when the fitted amplitude is
    indistinguishable from zero; ``phase`` is then NaN.
    """

    amplitude: float
    phase: float
    residual_rms: float
    amplitude_error: float
    phase_error: float
    n_points: int
    phase_identifiable: bool = True


class ScanError(ValueError):
    pass


def fit_phase_scan(points) -> PhaseScanFit:
    """Fit ``y = A sin(x + phi)`` to ``(x, y)`` points by linear least squares.

    ``A sin(x + phi) = a sin x + b cos x`` with ``a = A cos phi`` and
    ``b = A sin phi``; standard errors come from the residual variance.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (x, y) pairs")
    x, y = pts[:, 0], pts[:, 1]
    if x.size < 4:
        raise ScanError("need at least 4 points")
    if np.ptp(x) <= math.pi:
        raise ScanError("scan must span more than pi of phase")
    X = np.column_stack([np.sin(x), np.cos(x)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    a, b = coef
    resid = y - X @ coef
    rms = float(np.sqrt(np.mean(resid ** 2)))
    dof = max(x.size - 2, 1)
    s2 = float(resid @ resid) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    amp = float(math.hypot(a, b))
    scale = max(1.0, float(np.max(np.abs(y))) if y.size else 1.0)
    if amp <= 1e-12 * scale:
        return PhaseScanFit(amp, float("nan"), rms, float(np.sqrt(np.trace(cov) / 2)),
                            float("nan"), x.size, False)
    ja = np.array([a, b]) / amp
    jp = np.array([-b, a]) / amp ** 2
    amp_err = float(np.sqrt(ja @ cov @ ja))
    ph_err = float(np.sqrt(jp @ cov @ jp))
    return PhaseScanFit(amp, float(math.atan2(b, a)), rms, amp_err, ph_err, x.size, True)


@dataclass(frozen=True)
class StarkRow:
    """One Rabi-scale point of the light-shift trade-off (stage 2 scaled)."""

    scale: float
    rabi_mhz: float
    efficiency: float
    fidelity: float
    fidelity_no_stark: float

    @property
    def deficit(self) -> float:
        return self.fidelity_no_stark - self.fidelity


def _balanced_state(config, stage2_scale: float, stark: bool):
    from . import sequence as seq

    cfg = config.replace(toggles=replace(config.toggles, stark_asymmetry=stark))
    cfg = seq.calibrate(cfg, [1])
    cfg = seq.calibrate(cfg.scaled(2, stage2_scale), [2])
    return seq.conditional_two_photon_state(cfg)


def stark_row(config, scale: float, with_reference: bool = True) -> StarkRow:
    """Efficiency and best-Bell fidelity at one stage-2 Rabi scale.

    Both polarizations are rebalanced at every point. The reference
    fidelity comes from the same point with light shifts compensated.
    """
    on = _balanced_state(config, scale, True)
    off = _balanced_state(config, scale, False).best_bell_fidelity() if with_reference \
        else float("nan")
    rabi = config.stage(2).drive.tone_a.rabi * scale / TWO_PI
    return StarkRow(float(scale), float(rabi), float(on.stage_efficiencies[1]),
                    on.best_bell_fidelity(), float(off))


def stark_phase_report(config, scales) -> list[StarkRow]:
    """Trade-off table over stage-2 Rabi scales (relative to ``config``)."""
    return [stark_row(config, s) for s in scales]


@dataclass(frozen=True)
class StarkTradeoff:
    optimal: StarkRow
    two_thirds: StarkRow


def stark_tradeoff(config, bounds=(0.3, 2.5), xatol: float = 2e-3) -> StarkTradeoff:
    """Rows at the efficiency-optimal stage-2 Rabi scale and at 2/3 of that efficiency.

    The optimum is located by bounded Brent search on the balanced stage-2
    efficiency; the 2/3 point is the root below the optimum.
    """
    from scipy.optimize import brentq, minimize_scalar

    cache = {}

    def eff(s):
        key = round(float(s), 12)
        if key not in cache:
            cache[key] = stark_row(config, s, with_reference=False).efficiency
        return cache[key]

    res = minimize_scalar(lambda s: -eff(s), bounds=bounds, method="bounded",
                          options={"xatol": xatol})
    s_opt = float(res.x)
    target = 2 / 3 * eff(s_opt)
    lo = bounds[0]
    while eff(lo) > target:
        lo /= 2
        if lo < 1e-3:
            raise ScanError("efficiency does not fall to 2/3 of its optimum")
    s23 = brentq(lambda s: eff(s) - target, lo, s_opt, xtol=xatol)
    return StarkTradeoff(stark_row(config, s_opt), stark_row(config, s23))
