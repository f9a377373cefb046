"""Fine-structure level scheme of 40Ca+ and its dipole couplings.

40Ca+ has no nuclear spin, so the 18 fine-structure Zeeman sublevels
(S1/2, P1/2, P3/2, D3/2, D5/2) are an exact basis; there is no hyperfine
structure to add.

Angular-momentum quantum numbers are handled as :class:`fractions.Fraction`
so that half-integers compare exactly. Clebsch-Gordan coefficients follow
the Condon-Shortley phase convention. Only relative signs inside one
manifold carry physical meaning.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

BOHR_MAGNETON_MHZ_PER_GAUSS = 1.3996

HALF = Fraction(1, 2)


class Term(enum.Enum):
    """Fine-structure manifold, valued ``(label, l, j)``."""

    S1_2 = ("S1/2", 0, HALF)
    P1_2 = ("P1/2", 1, HALF)
    P3_2 = ("P3/2", 1, Fraction(3, 2))
    D3_2 = ("D3/2", 2, Fraction(3, 2))
    D5_2 = ("D5/2", 2, Fraction(5, 2))

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.value[1]

    @property
    def j(self) -> Fraction:
        return self.value[2]

    @property
    def g_j(self) -> float:
        return lande_g(self.l, HALF, self.j)

    @classmethod
    def from_label(cls, label: str) -> "Term":
        for term in cls:
            if term.label == label or term.name == label:
                return term
        raise ValueError(f"unknown term {label!r}")


TERMS = tuple(Term)

# (lower, upper) -> nominal wavelength label in nm; dipole-allowed classes only
DIPOLE_LINES = {
    (Term.S1_2, Term.P1_2): 397,
    (Term.S1_2, Term.P3_2): 393,
    (Term.D3_2, Term.P1_2): 866,
    (Term.D3_2, Term.P3_2): 850,
    (Term.D5_2, Term.P3_2): 854,
}
# quadrupole lines, kept as labels only
WAVELENGTH_LABELS = (397, 850, 854, 866, 393, 732, 729)


class Polarization(enum.IntEnum):
    """Spherical component q = m_upper - m_lower."""

    SIGMA_MINUS = -1
    PI = 0
    SIGMA_PLUS = 1

    @property
    def symbol(self) -> str:
        return {-1: "sigma-", 0: "pi", 1: "sigma+"}[int(self)]


def half(x) -> Fraction:
    """Coerce ``x`` to an exact integer or half-integer."""
    f = Fraction(x).limit_denominator(2)
    if f.denominator not in (1, 2) or abs(float(f) - float(x)) > 1e-9:
        raise ValueError(f"{x!r} is not a half-integer")
    return f


@dataclass(frozen=True)
class Level:
    term: Term
    m_j: Fraction
    index: int

    @property
    def j(self) -> Fraction:
        return self.term.j

    def __post_init__(self):
        if abs(self.m_j) > self.term.j or (self.term.j - self.m_j).denominator != 1:
            raise ValueError(f"m_j={self.m_j} invalid for {self.term.label}")

    def __str__(self) -> str:
        return f"{self.term.label}(m={self.m_j})"


@dataclass(frozen=True)
class TransitionLine:
    lower: Level
    upper: Level
    wavelength: int
    polarization: Polarization
    amplitude: float


@dataclass(frozen=True)
class ZeemanConfig:
    field_gauss: float = 8.25
    bohr_magneton_mhz_per_gauss: float = BOHR_MAGNETON_MHZ_PER_GAUSS

    def __post_init__(self):
        if self.field_gauss < 0:
            raise ValueError("field magnitude must be non-negative")


def lande_g(l: int, s, j) -> float:
    """Lande g-factor with g_s = 2."""
    s, j = half(s), half(j)
    if l < 0 or s < 0 or not (abs(l - s) <= j <= l + s) or (j - l - s).denominator != 1:
        raise ValueError(f"invalid coupling l={l}, s={s}, j={j}")
    jj = j * (j + 1)
    return float(1 + (jj + s * (s + 1) - l * (l + 1)) / (2 * jj))


def zeeman_shift(level: Level, cfg: ZeemanConfig) -> float:
    """Linear Zeeman shift of ``level`` in MHz (ordinary frequency)."""
    return level.term.g_j * cfg.bohr_magneton_mhz_per_gauss * cfg.field_gauss * float(level.m_j)


@lru_cache(maxsize=None)
def _cg_doubled(tj1: int, tm1: int, tj2: int, tm2: int, tJ: int, tM: int) -> float:
    # all arguments are twice the physical quantum numbers
    if tm1 + tm2 != tM:
        return 0.0
    if not (abs(tj1 - tj2) <= tJ <= tj1 + tj2) or (tj1 + tj2 + tJ) % 2:
        return 0.0
    if abs(tm1) > tj1 or abs(tm2) > tj2 or abs(tM) > tJ:
        return 0.0
    if (tj1 - tm1) % 2 or (tj2 - tm2) % 2 or (tJ - tM) % 2:
        return 0.0
    f = math.factorial
    a = (tJ + tj1 - tj2) // 2
    b = (tJ - tj1 + tj2) // 2
    c = (tj1 + tj2 - tJ) // 2
    d = (tj1 + tj2 + tJ) // 2 + 1
    pref = Fraction((tJ + 1) * f(a) * f(b) * f(c), f(d))
    pref *= (f((tJ + tM) // 2) * f((tJ - tM) // 2) * f((tj1 - tm1) // 2)
             * f((tj1 + tm1) // 2) * f((tj2 - tm2) // 2) * f((tj2 + tm2) // 2))
    total = Fraction(0)
    for k in range(0, c + 1):
        den = [k, c - k, (tj1 - tm1) // 2 - k, (tj2 + tm2) // 2 - k,
               (tJ - tj2 + tm1) // 2 + k, (tJ - tj1 - tm2) // 2 + k]
        if min(den) < 0:
            continue
        term = Fraction((-1) ** k, math.prod(f(x) for x in den))
        total += term
    return float(total) * math.sqrt(pref)


def clebsch_gordan(j1, m1, j2, m2, J, M) -> float:
    """<j1 m1; j2 m2 | J M> from Racah's closed formula."""
    args = [half(x) for x in (j1, m1, j2, m2, J, M)]
    return _cg_doubled(*(int(2 * x) for x in args))


def cg_amplitude(j_lower, m_lower, q, j_upper, m_upper) -> float:
    """Dipole coupling factor <j_lower m_lower; 1 q | j_upper m_upper>.

    Returns 0 whenever ``m_upper != m_lower + q`` or the triangle rule fails.
    """
    if int(q) not in (-1, 0, 1):
        return 0.0
    return clebsch_gordan(j_lower, m_lower, 1, q, j_upper, m_upper)


def build_levels() -> list[Level]:
    """All 18 sublevels, indexed by term (enum order) then ascending m_j."""
    levels = []
    for term in TERMS:
        tj = int(2 * term.j)
        for tm in range(-tj, tj + 1, 2):
            levels.append(Level(term, Fraction(tm, 2), len(levels)))
    return levels


LEVELS: tuple[Level, ...] = tuple(build_levels())
N_LEVELS = len(LEVELS)


def level(term: Term | str, m_j) -> Level:
    if isinstance(term, str):
        term = Term.from_label(term)
    m = half(m_j)
    for lv in LEVELS:
        if lv.term is term and lv.m_j == m:
            return lv
    raise ValueError(f"no level {term.label} m_j={m}")


def manifold(term: Term | str) -> list[Level]:
    if isinstance(term, str):
        term = Term.from_label(term)
    return [lv for lv in LEVELS if lv.term is term]


def lines_between(lower: Term, upper: Term) -> list[TransitionLine]:
    if (lower, upper) not in DIPOLE_LINES:
        return []
    wl = DIPOLE_LINES[(lower, upper)]
    out = []
    for lo in manifold(lower):
        for up in manifold(upper):
            q = up.m_j - lo.m_j
            if q not in (-1, 0, 1):
                continue
            amp = cg_amplitude(lo.j, lo.m_j, int(q), up.j, up.m_j)
            if amp != 0.0:
                out.append(TransitionLine(lo, up, wl, Polarization(int(q)), amp))
    return out


def build_level_graph() -> tuple[list[Level], list[TransitionLine]]:
    """Levels and every dipole-allowed line with its CG amplitude."""
    lines = []
    for lower, upper in DIPOLE_LINES:
        lines.extend(lines_between(lower, upper))
    return list(LEVELS), lines
