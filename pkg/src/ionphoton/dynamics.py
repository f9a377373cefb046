"""Ion-cavity Hamiltonians, Lindblad generators, and their integration.

Units: time in microseconds, every rate or frequency in rad/us. Values
quoted as ordinary frequencies (MHz) are multiplied by 2*pi exactly once,
at construction (see :meth:`SystemParams.from_mhz`).

Basis ordering of the truncated space is atom-major, then the sigma+
photon number, then the sigma- photon number::

    index = atom * (n_max + 1)**2 + n_plus * (n_max + 1) + n_minus

Cavity convention: ``kappa`` is the *field* decay rate, so each cavity
mode collapses through ``a`` at rate ``2 * kappa`` (photon-number decay
``exp(-2 kappa t)``).

Density matrices are vectorised row-major, so ``vec(A rho B) =
kron(A, B.T) @ vec(rho)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
import heapq
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from . import atomic
from .atomic import Level, Polarization, Term, ZeemanConfig
from .integrate import IntegrationError, Stepper, dense_eval, integrate

TWO_PI = 2 * math.pi

# Population decay rates (1/us) per line from lifetimes tau(P1/2)=7.098 ns,
# tau(P3/2)=6.924 ns and the measured branching fractions. Configurable.
DEFAULT_SPONTANEOUS_RATES = {
    397: 0.93565 / 7.098e-3,
    866: 0.06435 / 7.098e-3,
    393: 0.9347 / 6.924e-3,
    854: 0.0587 / 6.924e-3,
    850: 0.00661 / 6.924e-3,
}


class ConfigurationError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class HilbertSpace:
    n_max: int = 1
    atom_dim: int = atomic.N_LEVELS

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("photon cutoff must be >= 1")

    @property
    def cavity_dim(self) -> int:
        return (self.n_max + 1) ** 2

    @property
    def dim(self) -> int:
        return self.atom_dim * self.cavity_dim

    def index(self, atom: int, n_plus: int = 0, n_minus: int = 0) -> int:
        n = self.n_max + 1
        return atom * n * n + n_plus * n + n_minus

    def basis(self, atom: int, n_plus: int = 0, n_minus: int = 0) -> np.ndarray:
        v = np.zeros(self.dim, dtype=complex)
        v[self.index(atom, n_plus, n_minus)] = 1.0
        return v

    def atom_op(self, a) -> sp.csr_matrix:
        return sp.kron(sp.csr_matrix(a), sp.identity(self.cavity_dim), format="csr")

    def annihilate(self, pol: int) -> sp.csr_matrix:
        n = self.n_max + 1
        a1 = sp.diags(np.sqrt(np.arange(1, n)), 1, shape=(n, n))
        i1 = sp.identity(n)
        cav = sp.kron(a1, i1) if pol == Polarization.SIGMA_PLUS else sp.kron(i1, a1)
        return sp.kron(sp.identity(self.atom_dim), cav, format="csr")

    def number(self, pol: int) -> sp.csr_matrix:
        a = self.annihilate(pol)
        return (a.conj().T @ a).tocsr()

    def atom_projector(self, lv: Level) -> sp.csr_matrix:
        m = np.zeros((self.atom_dim, self.atom_dim))
        m[lv.index, lv.index] = 1.0
        return self.atom_op(m)

    def photon_sector(self, n_plus: int, n_minus: int) -> np.ndarray:
        """Indices of basis states with the given photon numbers."""
        return np.array([self.index(a, n_plus, n_minus) for a in range(self.atom_dim)])


@dataclass
class SystemParams:
    """Physical constants of the ion-cavity system (angular units)."""

    g0: float = TWO_PI * 0.76
    kappa: float = TWO_PI * 0.27
    zeeman: ZeemanConfig = field(default_factory=ZeemanConfig)
    cavity_detuning: float = 0.0
    spontaneous_rates: dict = field(default_factory=lambda: dict(DEFAULT_SPONTANEOUS_RATES))

    def __post_init__(self):
        if self.g0 < 0 or self.kappa < 0:
            raise ValueError("rates must be non-negative")
        if any(r < 0 for r in self.spontaneous_rates.values()):
            raise ValueError("spontaneous rates must be non-negative")

    @classmethod
    def from_mhz(cls, g0_mhz_over_2pi=0.76, kappa_mhz_over_2pi=0.27, field_gauss=8.25,
                 cavity_detuning_mhz_over_2pi=0.0, spontaneous_rates=None):
        return cls(
            g0=TWO_PI * g0_mhz_over_2pi,
            kappa=TWO_PI * kappa_mhz_over_2pi,
            zeeman=ZeemanConfig(field_gauss),
            cavity_detuning=TWO_PI * cavity_detuning_mhz_over_2pi,
            spontaneous_rates=dict(DEFAULT_SPONTANEOUS_RATES if spontaneous_rates is None
                                   else spontaneous_rates),
        )

    def zeeman_angular(self, lv: Level) -> float:
        return TWO_PI * atomic.zeeman_shift(lv, self.zeeman)


@dataclass(frozen=True)
class Envelope:
    """Flat-top pulse with sin^2 edges; ``rise_time = 0`` gives a square pulse.

    ``shape='sin2'`` is a full sin^2 bump over ``duration``.
    """

    duration: float
    rise_time: float = 0.0
    start: float = 0.0
    shape: str = "flattop"

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("envelope duration must be positive")
        if self.shape not in ("flattop", "sin2"):
            raise ValueError(f"unknown envelope shape {self.shape!r}")
        if self.shape == "flattop" and not 0 <= 2 * self.rise_time <= self.duration:
            raise ValueError("rise time must satisfy 0 <= 2*rise <= duration")

    @property
    def end(self) -> float:
        return self.start + self.duration

    def __call__(self, t: float) -> float:
        s = t - self.start
        if s < 0 or s > self.duration:
            return 0.0
        if self.shape == "sin2":
            return math.sin(math.pi * s / self.duration) ** 2
        r = self.rise_time
        if r == 0:
            return 1.0
        if s < r:
            return math.sin(0.5 * math.pi * s / r) ** 2
        if s > self.duration - r:
            return math.sin(0.5 * math.pi * (self.duration - s) / r) ** 2
        return 1.0

    def shifted(self, start: float) -> "Envelope":
        return Envelope(self.duration, self.rise_time, start, self.shape)


@dataclass(frozen=True)
class DriveTone:
    """One laser tone addressing ``lower -> upper`` with polarization ``q``.

    The tone frequency is fixed relative to the two-photon (Raman) resonance
    ``raman_initial -> raman_final``: ``detuning`` is the offset from that
    Zeeman-shifted resonance. ``rabi`` is the Rabi frequency of a transition
    with unit Clebsch-Gordan factor.
    """

    lower: Term
    upper: Term
    polarization: int
    rabi: float
    raman_initial: Level
    raman_final: Level
    detuning: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        if self.rabi < 0:
            raise ValueError("rabi frequency must be >= 0")
        ph = self.phase % TWO_PI
        object.__setattr__(self, "phase", 0.0 if ph >= TWO_PI else ph)
        if int(self.polarization) not in (-1, 0, 1):
            raise ConfigurationError("polarization must be -1, 0 or +1")

    def line_offset(self, params: SystemParams) -> float:
        """Tone frequency minus the zero-field ``lower -> upper`` line (rad/us)."""
        zi = params.zeeman_angular(self.raman_initial)
        zf = params.zeeman_angular(self.raman_final)
        return params.cavity_detuning + zf - zi + self.detuning

    def replace(self, **kw) -> "DriveTone":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(kw)
        return DriveTone(**d)


@dataclass(frozen=True)
class BichromaticDrive:
    tone_a: DriveTone
    tone_b: DriveTone
    envelope: Envelope

    @property
    def tones(self) -> tuple[DriveTone, DriveTone]:
        return (self.tone_a, self.tone_b)

    def replace(self, **kw) -> "BichromaticDrive":
        d = dict(tone_a=self.tone_a, tone_b=self.tone_b, envelope=self.envelope)
        d.update(kw)
        return BichromaticDrive(**d)

    def scaled(self, scale_a: float, scale_b: float | None = None) -> "BichromaticDrive":
        scale_b = scale_a if scale_b is None else scale_b
        return self.replace(tone_a=self.tone_a.replace(rabi=self.tone_a.rabi * scale_a),
                            tone_b=self.tone_b.replace(rabi=self.tone_b.rabi * scale_b))


class Component(NamedTuple):
    """Operator with time dependence ``slow(t) * exp(-1j * frequency * t)``.

    ``slow`` is ``None`` for a constant unit coefficient.
    """

    operator: sp.csr_matrix
    slow: Callable[[float], complex] | None = None
    frequency: float = 0.0


class Coefficient(NamedTuple):
    """Slow coefficient ``const * prod(env(t))`` over real envelopes.

    Keeping the factors explicit lets a generator evaluate every envelope
    once per time and form all coefficients with one vectorized product.
    """

    const: complex
    envelopes: tuple = ()

    def __call__(self, t: float) -> complex:
        v = self.const
        for e in self.envelopes:
            v = v * e(t)
        return v


_UNIT = Coefficient(1.0)


def _slow(s, t) -> complex:
    return 1.0 if s is None else s(t)


def _conj_product(a, b):
    """Slow coefficient ``conj(a(t)) * b(t)``."""
    if a is None and b is None:
        return None
    return _product(_conj(a), b)


def _product(a, b):
    if a is None and b is None:
        return None
    ca, cb = a or _UNIT, b or _UNIT
    if isinstance(ca, Coefficient) and isinstance(cb, Coefficient):
        return Coefficient(ca.const * cb.const, ca.envelopes + cb.envelopes)
    return lambda t: _slow(a, t) * _slow(b, t)


def _conj(a):
    if a is None:
        return None
    if isinstance(a, Coefficient):
        return Coefficient(np.conj(a.const), a.envelopes)
    return lambda t: np.conj(a(t))


@dataclass
class CollapseChannel:
    operator: sp.csr_matrix
    rate: float
    label: str

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("collapse rate must be >= 0")
        self.operator = sp.csr_matrix(self.operator, dtype=complex)

    def operator_at(self, t: float) -> sp.csr_matrix:
        return self.operator

    @property
    def parts(self) -> list[Component]:
        return [Component(self.operator)]


@dataclass
class DynamicChannel:
    """Collapse operator ``L(t) = sum_j slow_j(t) exp(-1j nu_j t) A_j``.

    Arises from adiabatic elimination, where the jump operator inherits the
    drive envelopes and carriers.
    """

    parts: list
    rate: float
    label: str

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("collapse rate must be >= 0")
        self.parts = [Component(sp.csr_matrix(p.operator, dtype=complex), p.slow, p.frequency)
                      for p in self.parts]

    def operator_at(self, t: float) -> sp.csr_matrix:
        out = None
        for p in self.parts:
            c = _slow(p.slow, t) * np.exp(-1j * p.frequency * t)
            out = c * p.operator if out is None else out + c * p.operator
        return out.tocsr()


@dataclass
class DrivenTerm:
    """Hamiltonian term ``c(t) R + conj(c(t)) R^dagger``.

    ``c(t) = slow(t) * exp(-1j * frequency * t)``; ``weight`` is the typical
    magnitude of ``slow`` (used to rank couplings when choosing frames).
    """

    operator: sp.csr_matrix
    slow: Callable[[float], complex] | None = None
    frequency: float = 0.0
    label: str = ""
    weight: float = 1.0

    def __post_init__(self):
        self.operator = sp.csr_matrix(self.operator, dtype=complex)

    def coefficient(self, t: float) -> complex:
        s = _slow(self.slow, t)
        if s == 0:
            return 0.0
        return s * np.exp(-1j * self.frequency * t)


@dataclass
class Problem:
    """Immutable description of ``H(t) = h0 + sum_k terms_k`` plus channels.

    ``extra_loss`` (static) and ``dynamic_loss`` (list of components) carry
    no-jump loss that has no collapse channel inside the represented space,
    e.g. decay into states removed by :func:`restrict`.
    """

    h0: sp.csr_matrix
    terms: list = field(default_factory=list)
    channels: list = field(default_factory=list)
    extra_loss: sp.csr_matrix | None = None
    dynamic_loss: list = field(default_factory=list)

    def __post_init__(self):
        self.h0 = sp.csr_matrix(self.h0, dtype=complex)

    @property
    def dim(self) -> int:
        return self.h0.shape[0]

    @property
    def static_channels(self) -> list:
        return [c for c in self.channels if isinstance(c, CollapseChannel)]

    def loss_operator(self) -> sp.csr_matrix:
        """Static part of ``sum_c rate_c L_c^dagger L_c`` (+ extra_loss)."""
        loss = sp.csr_matrix(self.h0.shape, dtype=complex)
        for c in self.static_channels:
            loss = loss + c.rate * (c.operator.conj().T @ c.operator)
        if self.extra_loss is not None:
            loss = loss + self.extra_loss
        return loss.tocsr()

    def hamiltonian(self, t: float) -> sp.csr_matrix:
        h = self.h0.copy()
        for term in self.terms:
            c = term.coefficient(t)
            if c != 0:
                h = h + c * term.operator + np.conj(c) * term.operator.conj().T
        return h.tocsr()

    def with_offset(self, energy: float) -> "Problem":
        return Problem(self.h0 + energy * sp.identity(self.dim), self.terms, self.channels,
                       self.extra_loss, self.dynamic_loss)


def _check_dims(*ops):
    dims = {op.shape for op in ops}
    if len(dims) != 1 or any(s[0] != s[1] for s in dims):
        raise ValueError(f"dimension mismatch: {sorted(dims)}")


# ---------------------------------------------------------------------------
# Operator construction for the 18-level ion in the two-mode cavity


def _atomic_raising(lower: Term, upper: Term, q: int) -> np.ndarray:
    m = np.zeros((atomic.N_LEVELS, atomic.N_LEVELS))
    for line in atomic.lines_between(lower, upper):
        if line.polarization == q:
            m[line.upper.index, line.lower.index] = line.amplitude
    if not m.any():
        raise ConfigurationError(
            f"no dipole-allowed {lower.label}->{upper.label} line with q={q}")
    return m


def _raising(space: HilbertSpace, lower: Term, upper: Term, q: int) -> sp.csr_matrix:
    return space.atom_op(_atomic_raising(lower, upper, q))


def static_hamiltonian(space: HilbertSpace, params: SystemParams) -> sp.csr_matrix:
    """Zeeman shifts, cavity detuning and vacuum coupling (rotating frame)."""
    z = np.array([params.zeeman_angular(lv) for lv in atomic.LEVELS])
    h = space.atom_op(np.diag(z))
    h = h + params.cavity_detuning * (space.number(1) + space.number(-1))
    for q in (Polarization.SIGMA_PLUS, Polarization.SIGMA_MINUS):
        lower = space.atom_op(_atomic_raising(Term.D5_2, Term.P3_2, q).T)
        a = space.annihilate(q)
        coup = params.g0 * (a.conj().T @ lower)
        h = h + coup + coup.conj().T
    return sp.csr_matrix(h, dtype=complex)


def drive_terms(space: HilbertSpace, params: SystemParams,
                drive: BichromaticDrive) -> list[DrivenTerm]:
    terms = []
    env = drive.envelope
    for name, tone in zip("ab", drive.tones):
        if (tone.lower, tone.upper) not in atomic.DIPOLE_LINES:
            raise ConfigurationError(
                f"{tone.lower.label}->{tone.upper.label} is not a dipole-allowed line")
        r = _raising(space, tone.lower, tone.upper, int(tone.polarization))
        amp = tone.rabi / 2 * np.exp(-1j * tone.phase)
        terms.append(DrivenTerm(r, Coefficient(amp, (env,)), tone.line_offset(params), f"tone_{name}", tone.rabi / 2))
    return terms


def collapse_channels(space: HilbertSpace, params: SystemParams,
                      spontaneous: bool = True) -> list[CollapseChannel]:
    chans = [
        CollapseChannel(space.annihilate(1), 2 * params.kappa, "cavity_sigma+"),
        CollapseChannel(space.annihilate(-1), 2 * params.kappa, "cavity_sigma-"),
    ]
    if not spontaneous:
        return chans
    for (lower, upper), wl in atomic.DIPOLE_LINES.items():
        rate = params.spontaneous_rates.get(wl, 0.0)
        if rate == 0:
            continue
        for q in (-1, 0, 1):
            m = np.zeros((space.atom_dim, space.atom_dim))
            for line in atomic.lines_between(lower, upper):
                if line.polarization == q:
                    m[line.lower.index, line.upper.index] = line.amplitude
            if m.any():
                chans.append(CollapseChannel(space.atom_op(m), rate,
                                             f"spont_{wl}_{Polarization(q).symbol}"))
    return chans


def build_problem(space: HilbertSpace, params: SystemParams,
                  drives: Sequence[BichromaticDrive] = (), spontaneous: bool = True,
                  extra_terms: Sequence[DrivenTerm] = ()) -> Problem:
    terms = []
    for d in drives:
        terms.extend(drive_terms(space, params, d))
    terms.extend(extra_terms)
    return Problem(static_hamiltonian(space, params), terms,
                   collapse_channels(space, params, spontaneous))


def build_hamiltonian(space: HilbertSpace, params: SystemParams,
                      drives: Sequence[BichromaticDrive], t: float) -> np.ndarray:
    """Dense rotating-frame Hamiltonian at time ``t``."""
    return build_problem(space, params, drives, spontaneous=False).hamiltonian(t).toarray()


# ---------------------------------------------------------------------------
# Generator components


def hamiltonian_components(problem: Problem) -> list[Component]:
    comps = [Component(problem.h0)]
    for term in problem.terms:
        comps.append(Component(term.operator, term.slow, term.frequency))
        comps.append(Component(term.operator.conj().T.tocsr(), _conj(term.slow), -term.frequency))
    return comps


def _pair_loss(parts, rate) -> list[Component]:
    """Components of ``rate * L(t)^dagger L(t)`` for ``L = sum parts``."""
    out = []
    for pa in parts:
        for pb in parts:
            op = rate * (pa.operator.conj().T @ pb.operator)
            if op.nnz:
                out.append(Component(op.tocsr(), _conj_product(pa.slow, pb.slow),
                                     pb.frequency - pa.frequency))
    return out


def loss_components(problem: Problem) -> list[Component]:
    """Components of the anti-Hermitian no-jump loss ``Lambda(t)``."""
    comps = [Component(problem.loss_operator())]
    for c in problem.channels:
        if isinstance(c, DynamicChannel):
            comps.extend(_pair_loss(c.parts, c.rate))
    comps.extend(problem.dynamic_loss)
    return comps


def jump_components(channel, other=None) -> list[Component]:
    """Superoperator components of ``rate * L rho M^dagger`` (``M = L`` by default)."""
    other = channel if other is None else other
    out = []
    for pa in channel.parts:
        for pb in other.parts:
            op = channel.rate * _sprepost(pa.operator, pb.operator.conj().T)
            out.append(Component(op, _conj_product(pb.slow, pa.slow) if pb.slow or pa.slow
                                 else None, pa.frequency - pb.frequency))
    return out


def _spre(a):
    return sp.kron(a, sp.identity(a.shape[0]), format="csr")


def _spost(a):
    return sp.kron(sp.identity(a.shape[0]), a.T, format="csr")


def _sprepost(a, b):
    return sp.kron(a, b.T, format="csr")


def commutator_superop(h) -> sp.csr_matrix:
    return (-1j * (_spre(h) - _spost(h))).tocsr()


def jump_superop(a, b, rate) -> sp.csr_matrix:
    """rho -> rate * a rho b^dagger."""
    return (rate * _sprepost(a, b.conj().T)).tocsr()


class SecularOperator:
    """``A(t) = sum_k slow_k(t) exp(-1j nu_k t) A_k`` as one sparse matrix.

    With ``phase`` (one real entry per index) the operator is the generator
    of ``exp(1j*phase*t) * y``: entry (r, c) of component k carries
    ``exp(1j*(phase[r] - phase[c] - nu_k)*t)`` and ``1j*phase`` is added on
    the diagonal. ``cutoff`` drops entries whose total frequency exceeds it
    (secular approximation); ``None`` keeps everything. ``generator=False``
    omits the diagonal term, for inhomogeneous (source) operators.
    """

    def __init__(self, components, dim: int, phase=None, cutoff: float | None = None,
                 generator: bool = True):
        phase = None if phase is None else np.asarray(phase, dtype=float)
        if phase is not None and generator:
            components = list(components) + [Component(sp.diags(1j * phase, format="csr"))]
        rows, cols, vals, keys = [], [], [], []
        key_ids: dict = {}
        key_comp, key_w = [], []
        slows = []
        static = sp.csr_matrix((dim, dim), dtype=complex)
        for comp in components:
            if comp.slow is None and comp.frequency == 0 and phase is None:
                static = static + comp.operator
                continue
            m = sp.coo_matrix(comp.operator)
            nz = m.data != 0
            r, c, v = m.row[nz], m.col[nz], m.data[nz]
            w = np.full(r.shape, -comp.frequency)
            if phase is not None:
                w = w + phase[r] - phase[c]
            w = np.round(w, 9)
            if cutoff is not None:
                ok = np.abs(w) <= cutoff
                r, c, v, w = r[ok], c[ok], v[ok], w[ok]
            if r.size == 0:
                continue
            ci = len(slows)
            slows.append(comp.slow)
            uw, inv = np.unique(w, return_inverse=True)
            for j, wj in enumerate(uw):
                key = key_ids.setdefault((ci, wj), len(key_comp))
                if key == len(key_comp):
                    key_comp.append(ci)
                    key_w.append(wj)
                sel = inv == j
                rows.append(r[sel]); cols.append(c[sel]); vals.append(v[sel])
                keys.append(np.full(sel.sum(), key))
        if static.nnz:
            m = static.tocoo()
            ci = len(slows)
            slows.append(None)
            key_comp.append(ci); key_w.append(0.0)
            rows.append(m.row); cols.append(m.col); vals.append(m.data)
            keys.append(np.full(m.nnz, len(key_comp) - 1))
        if rows:
            rows, cols = np.concatenate(rows), np.concatenate(cols)
            vals, keys = np.concatenate(vals).astype(complex), np.concatenate(keys)
        else:
            rows = cols = keys = np.zeros(0, dtype=int)
            vals = np.zeros(0, dtype=complex)
        order = np.argsort(rows, kind="stable")
        self.base = vals[order]
        self.keys = keys[order]
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=dim))])
        self._mat = sp.csr_matrix((self.base.copy(), cols[order], indptr), shape=(dim, dim))
        self.slows = slows
        self._vector = all(sl is None or isinstance(sl, Coefficient) for sl in slows)
        if self._vector:
            envs = list(dict.fromkeys(e for sl in slows if sl is not None
                                      for e in sl.envelopes))
            self._envs = envs
            self._powers = np.zeros((len(slows), len(envs)))
            self._consts = np.ones(len(slows), dtype=complex)
            for i, sl in enumerate(slows):
                if sl is not None:
                    self._consts[i] = sl.const
                    for e in sl.envelopes:
                        self._powers[i, envs.index(e)] += 1
        self.key_comp = np.asarray(key_comp, dtype=int)
        self.key_w = np.asarray(key_w, dtype=float)
        self.shape = (dim, dim)
        self.nnz = self.base.size

    def matrix(self, t: float) -> sp.csr_matrix:
        if self._vector:
            ev = np.array([e(t) for e in self._envs])
            sv = self._consts * np.prod(ev ** self._powers, axis=1)
        else:
            sv = np.array([_slow(s, t) for s in self.slows], dtype=complex)
        factor = sv[self.key_comp] * np.exp(1j * self.key_w * t)
        self._mat.data = self.base * factor[self.keys]
        return self._mat

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.matrix(t) @ y


def resonant_frame(problem: Problem, seeds, min_score: float = 0.0) -> np.ndarray:
    """Frame energies making the strongest coherent couplings static.

    Starting from ``seeds`` (energy = own diagonal), couplings are followed
    in order of decreasing resonance ``w / (w + |mismatch|)``, with ``w``
    the coupling strength and ``mismatch`` the bare energy defect of the
    transition; a state reached through a term with carrier ``f`` gets
    energy ``eps_from + f``. Unreached states keep their own diagonal
    energy. Couplings scoring below ``min_score`` are ignored, so weak
    off-resonant couplings do not drag populated states off their own
    energy (useful once the far-detuned states are eliminated). Any frame
    gives identical physics; this one lets the integrator take long steps.
    """
    n = problem.dim
    diag = problem.h0.diagonal().real
    edges = [[] for _ in range(n)]

    def add(m, f, w):
        m = sp.coo_matrix(m)
        for j, i, v in zip(m.row, m.col, m.data):
            strength = w * abs(v)
            if i != j and strength > 0:
                score = strength / (strength + abs(diag[j] - diag[i] - f))
                if score >= min_score:
                    edges[i].append((score, j, f))

    add(problem.h0, 0.0, 1.0)
    for term in problem.terms:
        add(term.operator, term.frequency, term.weight)
        add(term.operator.conj().T, -term.frequency, term.weight)
    eps = np.full(n, np.nan)
    heap = []
    for s_ in np.atleast_1d(seeds):
        eps[s_] = diag[s_]
        for w, j, f in edges[s_]:
            heapq.heappush(heap, (-w, int(s_), int(j), f))
    while heap:
        _, i, j, f = heapq.heappop(heap)
        if not np.isnan(eps[j]):
            continue
        eps[j] = eps[i] + f
        for w, k, g in edges[j]:
            if np.isnan(eps[k]):
                heapq.heappush(heap, (-w, j, int(k), g))
    unset = np.isnan(eps)
    eps[unset] = diag[unset]
    return eps


def superop_phase(eps: np.ndarray) -> np.ndarray:
    """Frame phases of vectorised density-matrix entries (i, j): eps_i - eps_j."""
    return (eps[:, None] - eps[None, :]).reshape(-1)


def to_frame(rho: np.ndarray, eps: np.ndarray | None, t: float) -> np.ndarray:
    if eps is None:
        return rho
    u = np.exp(1j * eps * t)
    if rho.ndim == 1:
        return u * rho
    return u[:, None] * rho * np.conj(u)[None, :]


def from_frame(rho: np.ndarray, eps: np.ndarray | None, t: float) -> np.ndarray:
    return to_frame(rho, None if eps is None else -eps, t)


class Liouvillian:
    """Sparse time-dependent generator acting on vectorised density matrices.

    ``excluded`` names channels whose jump (sandwich) term is dropped while
    their anticommutator loss is kept: the generator then propagates the
    unnormalised state conditioned on no jump in those channels. With a
    frame ``eps`` the generator acts on ``U rho U^dagger``,
    ``U = exp(1j*eps*t)``.
    """

    def __init__(self, problem: Problem, excluded: Sequence[str] = (), frame=None,
                 cutoff: float | None = None):
        self.problem = problem
        for c in problem.channels:
            for p in c.parts:
                _check_dims(p.operator, problem.h0)
        comps = []
        for h in hamiltonian_components(problem):
            comps.append(Component(-1j * _spre(h.operator), h.slow, h.frequency))
            comps.append(Component(1j * _spost(h.operator), h.slow, h.frequency))
        for lo in loss_components(problem):
            comps.append(Component(-0.5 * (_spre(lo.operator) + _spost(lo.operator)),
                                   lo.slow, lo.frequency))
        for c in problem.channels:
            if c.label not in excluded:
                comps.extend(jump_components(c))
        self.components = comps
        self.dim = problem.dim
        self.frame = None if frame is None else np.asarray(frame, dtype=float)
        self.cutoff = cutoff
        self.operator = SecularOperator(
            comps, self.dim ** 2, None if self.frame is None else superop_phase(self.frame),
            cutoff)

    def source(self, channel, other=None) -> SecularOperator:
        """Frame-consistent operator for ``rho -> rate * L rho M^dagger``."""
        ph = None if self.frame is None else superop_phase(self.frame)
        return SecularOperator(jump_components(channel, other), self.dim ** 2, ph,
                               self.cutoff, generator=False)

    def __call__(self, t: float, y: np.ndarray) -> np.ndarray:
        return self.operator(t, y)


def vec(rho: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(rho).reshape(-1)


def unvec(v: np.ndarray, d: int) -> np.ndarray:
    return v.reshape(d, d)


@dataclass
class MEResult:
    rho: np.ndarray
    error_estimate: float
    n_steps: int
    times: np.ndarray | None = None
    states: list | None = None


def propagate_me(problem: Problem, rho0: np.ndarray, t0: float, t1: float,
                 tolerance: float = 1e-8, t_eval=None, max_step=np.inf,
                 frame=None) -> MEResult:
    """Adaptive integration of the master equation from ``t0`` to ``t1``.

    ``frame`` optionally selects rotating-frame energies (see
    :func:`resonant_frame`); results are returned in the base frame. Raises
    :class:`IntegrationError` (carrying the time reached) on step-size
    underflow.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    d = problem.dim
    rho0 = np.asarray(rho0, dtype=complex)
    _check_dims(sp.csr_matrix(rho0), problem.h0)
    gen = Liouvillian(problem, frame=frame)
    eps = gen.frame
    sol = integrate(gen, t0, vec(to_frame(rho0, eps, t0)), t1, rtol=tolerance,
                    atol=tolerance * 1e-2, t_eval=t_eval, max_step=max_step)
    states = [from_frame(unvec(y, d), eps, t) for t, y in zip(sol.t, sol.y)]
    return MEResult(states[-1], sol.error_estimate, sol.n_steps,
                    sol.t if t_eval is not None else None,
                    states if t_eval is not None else None)


def lindblad_rhs(rho: np.ndarray, hamiltonian, channels=()) -> np.ndarray:
    """``d rho/dt = -i[H, rho] + sum_c rate_c (L rho L^dagger - {L^dagger L, rho}/2)``.

    Dense reference form of the generator; ``channels`` holds
    :class:`CollapseChannel` objects or ``(operator, rate)`` pairs.
    """
    rho = np.asarray(rho, dtype=complex)
    h = hamiltonian.toarray() if sp.issparse(hamiltonian) else np.asarray(hamiltonian)
    ops = []
    for c in channels:
        op, rate = (c.operator, c.rate) if isinstance(c, CollapseChannel) else c
        ops.append((op.toarray() if sp.issparse(op) else np.asarray(op), rate))
    if h.shape != rho.shape or any(op.shape != rho.shape for op, _ in ops):
        raise ValueError("dimension mismatch between state and operators")
    out = -1j * (h @ rho - rho @ h)
    for op, rate in ops:
        ld = op.conj().T @ op
        out += rate * (op @ rho @ op.conj().T - 0.5 * (ld @ rho + rho @ ld))
    return out


def expectation(op, rho: np.ndarray):
    """``trace(op @ rho)``; returned real when ``op`` is Hermitian."""
    op = op.toarray() if sp.issparse(op) else np.asarray(op)
    rho = np.asarray(rho)
    if op.shape != rho.shape:
        raise ValueError(f"dimension mismatch: {op.shape} vs {rho.shape}")
    val = np.einsum("ij,ji->", op, rho)
    if np.allclose(op, op.conj().T, atol=1e-14):
        return float(val.real)
    return complex(val)


# ---------------------------------------------------------------------------
# Monte-Carlo wave-function unraveling


@dataclass(frozen=True)
class JumpEvent:
    time: float
    label: str
    channel: int


def effective_generator(problem: Problem, frame=None, cutoff=None) -> SecularOperator:
    """``psi -> -i H_eff(t) psi`` with ``H_eff = H - (i/2) Lambda``."""
    comps = [Component(-1j * h.operator, h.slow, h.frequency)
             for h in hamiltonian_components(problem)]
    comps += [Component(-0.5 * lo.operator, lo.slow, lo.frequency)
              for lo in loss_components(problem)]
    return SecularOperator(comps, problem.dim, frame, cutoff)


class TrajectoryEngine:
    """Batched first-order quantum-jump unraveling.

    Trajectories share adaptive steps; each column owns its random stream,
    so a trajectory's output depends only on its generator and on the batch
    it is propagated with.
    """

    def __init__(self, problem: Problem, rtol: float = 1e-7, atol: float = 1e-9,
                 max_step: float = np.inf, frame=None, cutoff=None):
        self.problem = problem
        self.frame = None if frame is None else np.asarray(frame, dtype=float)
        self.gen = effective_generator(problem, self.frame, cutoff)
        self.channels = problem.channels
        self._ops = [SecularOperator(c.parts, problem.dim, generator=False)
                     for c in self.channels]
        self.rtol, self.atol, self.max_step = rtol, atol, max_step

    def _jump(self, t, psi, rng, record):
        lab = from_frame(psi, self.frame, t)
        ops = [op.matrix(t) for op in self._ops]
        weights = np.array([c.rate * np.linalg.norm(op @ lab) ** 2
                            for c, op in zip(self.channels, ops)])
        total = weights.sum()
        if not np.isfinite(total) or total <= 0:
            raise NumericalError(f"norm decayed without an available jump at t={t:.6g}")
        k = int(np.searchsorted(np.cumsum(weights) / total, rng.random(), side="right"))
        k = min(k, len(self.channels) - 1)
        new = to_frame(ops[k] @ lab, self.frame, t)
        record.append(JumpEvent(float(t), self.channels[k].label, k))
        return new / np.linalg.norm(new)

    def _evolve(self, Y, thresholds, rngs, records, t_a, t_b):
        if t_b <= t_a:
            return Y
        st = Stepper(self.gen, t_a, Y, t_b, rtol=self.rtol, atol=self.atol,
                     max_step=self.max_step)
        while not st.done:
            st.step()
            norms = np.sum(np.abs(st.y) ** 2, axis=0)
            hit = np.nonzero(norms <= thresholds)[0]
            if hit.size == 0:
                continue
            Y = st.y.copy()
            for j in hit:
                Kj = [k[:, j] for k in st.K]
                y0j, h = st.y_old[:, j], st.h_last
                r = thresholds[j]

                def excess(theta):
                    v = dense_eval(y0j, Kj, h, theta)
                    return float(np.vdot(v, v).real) - r

                if excess(0.0) <= 0:
                    theta = 0.0
                else:
                    theta = brentq(excess, 0.0, 1.0, xtol=1e-12)
                tj = st.t_old + theta * h
                psi = dense_eval(y0j, Kj, h, theta)
                psi = self._jump(tj, psi, rngs[j], records[j])
                thresholds[j] = rngs[j].random()
                sub = self._evolve(psi[:, None].copy(), thresholds[j:j + 1], [rngs[j]],
                                   [records[j]], tj, st.t)
                Y[:, j] = sub[:, 0]
            st.restart(st.t, Y)
        return st.y

    def run(self, psi0: np.ndarray, t0: float, t1: float, rngs, thresholds=None):
        """Propagate columns of ``psi0`` (d x N); returns (states, records, thresholds).

        ``thresholds`` carries each trajectory's pending jump threshold across
        consecutive calls; unnormalised inputs are allowed in that case.
        """
        psi0 = np.asarray(psi0, dtype=complex)
        if psi0.ndim == 1:
            psi0 = psi0[:, None]
        n = psi0.shape[1]
        if thresholds is None:
            thresholds = np.array([g.random() for g in rngs])
        records = [[] for _ in range(n)]
        Y = psi0.copy()
        if self.frame is not None:
            Y = np.exp(1j * self.frame * t0)[:, None] * Y
        Y = self._evolve(Y, thresholds, rngs, records, t0, t1)
        if self.frame is not None:
            Y = np.exp(-1j * self.frame * t1)[:, None] * Y
        return Y, records, thresholds


def mcwf_trajectory(problem: Problem, psi0: np.ndarray, t0: float, t1: float, seed,
                    rtol: float = 1e-8) -> tuple[np.ndarray, list[JumpEvent]]:
    """Single quantum trajectory; returns the normalised final state and jumps."""
    psi0 = np.asarray(psi0, dtype=complex)
    if psi0.ndim != 1:
        raise ValueError("initial state must be a pure state vector")
    rng = np.random.default_rng(seed)
    eng = TrajectoryEngine(problem, rtol=rtol, atol=rtol * 1e-2)
    Y, records, _ = eng.run(psi0 / np.linalg.norm(psi0), t0, t1, [rng])
    psi = Y[:, 0]
    return psi / np.linalg.norm(psi), records[0]


# ---------------------------------------------------------------------------
# Exact subspace reduction


def flow_graph(problem: Problem) -> sp.csr_matrix:
    """Boolean adjacency: entry (j, i) set when amplitude can flow i -> j."""
    pat = abs(problem.h0).astype(bool).astype(float)
    for term in problem.terms:
        r = abs(term.operator).astype(bool).astype(float)
        pat = pat + r + r.T
    for c in problem.channels:
        if c.rate > 0:
            for p in c.parts:
                pat = pat + abs(p.operator).astype(bool).astype(float)
    return sp.csr_matrix(pat.astype(bool))


def reachable(graph: sp.csr_matrix, start, reverse: bool = False) -> np.ndarray:
    """Indices reachable from ``start`` (or that reach it, with ``reverse``)."""
    g = graph.T.tocsr() if not reverse else graph.tocsr()
    # row i of g lists the successors of i
    seen = np.zeros(graph.shape[0], dtype=bool)
    stack = list(np.atleast_1d(start))
    seen[stack] = True
    while stack:
        i = stack.pop()
        for j in g.indices[g.indptr[i]:g.indptr[i + 1]]:
            if not seen[j]:
                seen[j] = True
                stack.append(j)
    return np.nonzero(seen)[0]


def restrict(problem: Problem, keep: np.ndarray) -> Problem:
    """Project every operator onto the basis states ``keep``.

    Exact for observables supported on ``keep`` when no amplitude flows from
    the discarded states back into ``keep``: decay into discarded states is
    retained as no-jump loss.
    """
    keep = np.asarray(keep)
    drop = np.setdiff1d(np.arange(problem.dim), keep)

    def cut(m, rows=keep):
        return sp.csr_matrix(m)[rows][:, keep]

    channels, dyn_loss = [], [Component(cut(c.operator), c.slow, c.frequency)
                              for c in problem.dynamic_loss]
    for c in problem.channels:
        if isinstance(c, DynamicChannel):
            parts = [Component(cut(p.operator), p.slow, p.frequency) for p in c.parts]
            channels.append(DynamicChannel(parts, c.rate, c.label))
            lost = [Component(cut(p.operator, drop), p.slow, p.frequency) for p in c.parts]
            dyn_loss.extend(_pair_loss(lost, c.rate))
        else:
            channels.append(CollapseChannel(cut(c.operator), c.rate, c.label))
    kept = sp.csr_matrix((len(keep), len(keep)), dtype=complex)
    for c in channels:
        if isinstance(c, CollapseChannel):
            kept = kept + c.rate * (c.operator.conj().T @ c.operator)
    extra = (cut(problem.loss_operator()) - kept).tocsr()
    extra.eliminate_zeros()
    return Problem(
        cut(problem.h0),
        [DrivenTerm(cut(t.operator), t.slow, t.frequency, t.label, t.weight)
         for t in problem.terms],
        channels,
        extra if extra.nnz else None,
        [c for c in dyn_loss if c.operator.nnz],
    )


@dataclass
class ConditionalResult:
    """Unnormalised states after ``propagate_conditional``.

    ``none[i]`` is block ``i`` with no emission in the monitored channels;
    ``emitted[(p, q)][i]`` is ``int dt' U(t, t') L_p rho(t') L_q^dagger ...``
    i.e. block ``i`` with exactly one emission, kept as the (p, q) coherence
    between monitored channels. ``second[i]`` is the probability of a further
    monitored emission after the first one (dropped from ``emitted``).
    """

    none: list
    emitted: dict
    n_steps: int
    second: np.ndarray | None = None


def propagate_conditional(problem: Problem, blocks, monitored: Sequence[str], t0: float,
                          t1: float, frame=None, cutoff=None,
                          tolerance: float = 1e-7, max_step: float = np.inf) -> ConditionalResult:
    """Propagate operator blocks resolving at most one jump in ``monitored``.

    All blocks evolve under the generator with the monitored jumps removed;
    the one-emission blocks are fed by the monitored jump sandwiches, so
    their traces are emission probabilities (or coherences for p != q).
    """
    d = problem.dim
    chans = {c.label: c for c in problem.channels}
    missing = [m for m in monitored if m not in chans]
    if missing:
        raise ConfigurationError(f"unknown channels {missing}")
    if any(not isinstance(chans[m], CollapseChannel) for m in monitored):
        raise ConfigurationError("monitored channels must be static")
    gen = Liouvillian(problem, excluded=tuple(monitored), frame=frame, cutoff=cutoff)
    eps = gen.frame
    keys = [(p, q) for p in monitored for q in monitored]
    src = [gen.source(chans[p], chans[q]) for p, q in keys]
    rate_op = sum(chans[m].rate * (chans[m].operator.conj().T @ chans[m].operator)
                  for m in monitored)
    idx, val, w = _trace_functional(sp.csr_matrix(rate_op), d, eps)
    nb, nk, d2 = len(blocks), len(keys) + 1, d * d
    Y0 = np.zeros((d2 + 1, nk * nb), dtype=complex)
    for i, b in enumerate(blocks):
        Y0[:d2, i] = vec(to_frame(np.asarray(b, dtype=complex), eps, t0))

    def rhs(t, y):
        Y = y.reshape(d2 + 1, nk * nb)
        out = np.empty_like(Y)
        out[:d2] = gen.operator.matrix(t) @ Y[:d2]
        for k, s in enumerate(src):
            out[:d2, (k + 1) * nb:(k + 2) * nb] += s.matrix(t) @ Y[:d2, :nb]
        out[d2] = (val * np.exp(1j * w * t)) @ Y[idx]
        return out.reshape(-1)

    sol = integrate(rhs, t0, Y0.reshape(-1), t1, rtol=tolerance, atol=tolerance * 1e-3,
                    max_step=max_step)
    Yf = sol.final.reshape(d2 + 1, nk * nb)

    def back(k, i):
        return from_frame(unvec(Yf[:d2, k * nb + i], d), eps, t1)

    none = [back(0, i) for i in range(nb)]
    emitted = {key: [back(k + 1, i) for i in range(nb)] for k, key in enumerate(keys)}
    second = np.zeros(nb)
    for k, (p, q) in enumerate(keys):
        if p == q:
            second += Yf[d2, (k + 1) * nb:(k + 2) * nb].real
    return ConditionalResult(none, emitted, sol.n_steps, second)


@dataclass
class EmissionResult:
    """Output of :func:`propagate_emission`.

    ``integrals[(p, q)][i]`` is ``int rate tr(L_p rho_i L_q^dagger) dt`` for
    block ``i`` evolved without monitored jumps; ``none`` holds the final
    blocks. With ``t_eval`` the densities ``rate tr(L_p rho_i L_p^dagger)``
    are sampled at those times in ``density[p]`` (shape times x blocks).
    """

    none: list
    integrals: dict
    n_steps: int
    times: np.ndarray | None = None
    density: dict | None = None


def _trace_functional(a: sp.csr_matrix, d: int, eps) -> tuple:
    """Entries of ``Y -> tr(a Y)`` on row-major vec(Y) with their frame phases."""
    m = sp.coo_matrix(a)
    idx = m.col * d + m.row
    w = np.zeros(m.nnz) if eps is None else eps[m.row] - eps[m.col]
    return idx, m.data.astype(complex), w


def propagate_emission(problem: Problem, blocks, monitored: Sequence[str], t0: float,
                       t1: float, frame=None, cutoff=None, tolerance: float = 1e-7,
                       t_eval=None, max_step: float = np.inf) -> EmissionResult:
    """Emission probabilities and coherences into monitored static channels.

    Cheaper than :func:`propagate_conditional` when only photon statistics
    are needed: the one-emission blocks are never propagated, so states
    that can no longer emit may be removed beforehand (see :func:`restrict`).
    Valid when a second emission in the same window is negligible.
    """
    d = problem.dim
    chans = {c.label: c for c in problem.channels}
    for m in monitored:
        if not isinstance(chans.get(m), CollapseChannel):
            raise ConfigurationError(f"monitored channel {m!r} must be a static channel")
    gen = Liouvillian(problem, excluded=tuple(monitored), frame=frame, cutoff=cutoff)
    eps = gen.frame
    keys = [(p, q) for p in monitored for q in monitored]
    funcs = []
    for p, q in keys:
        cp, cq = chans[p], chans[q]
        funcs.append(_trace_functional(cp.rate * (cq.operator.conj().T @ cp.operator), d, eps))
    nb, nk, d2 = len(blocks), len(keys), d * d
    Y0 = np.zeros((d2 + nk, nb), dtype=complex)
    for i, b in enumerate(blocks):
        Y0[:d2, i] = vec(to_frame(np.asarray(b, dtype=complex), eps, t0))

    def rhs(t, y):
        Y = y.reshape(d2 + nk, nb)
        out = np.empty_like(Y)
        out[:d2] = gen.operator.matrix(t) @ Y[:d2]
        for k, (idx, val, w) in enumerate(funcs):
            out[d2 + k] = (val * np.exp(1j * w * t)) @ Y[idx]
        return out.reshape(-1)

    sol = integrate(rhs, t0, Y0.reshape(-1), t1, rtol=tolerance, atol=tolerance * 1e-3,
                    t_eval=t_eval, max_step=max_step)
    Yf = sol.final.reshape(d2 + nk, nb)
    none = [from_frame(unvec(Yf[:d2, i], d), eps, t1) for i in range(nb)]
    integrals = {key: Yf[d2 + k].copy() for k, key in enumerate(keys)}
    density = None
    if t_eval is not None:
        density = {}
        for k, (p, q) in enumerate(keys):
            if p != q:
                continue
            idx, val, w = funcs[k]
            density[p] = np.array([((val * np.exp(1j * w * t)) @ y.reshape(d2 + nk, nb)[idx]).real
                                   for t, y in zip(sol.t, sol.y)])
    return EmissionResult(none, integrals, sol.n_steps,
                          None if t_eval is None else np.asarray(sol.t), density)
