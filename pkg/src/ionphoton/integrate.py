"""Dormand-Prince 5(4) integrator for complex array-valued ODEs.

Works on arrays of any shape (state vectors, batched trajectories,
vectorised density matrices). Supports adaptive stepping with a
continuous extension, and a fixed-step mode for convergence studies.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
# difference between the 5th- and embedded 4th-order weights
E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension (Shampine), columns multiply theta**1..4
P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])
ORDER = 5

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0


class IntegrationError(RuntimeError):
    """Raised when the step size underflows; ``t`` is the time reached."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (reached t={t:.6g})")
        self.t = t


@dataclass
class Solution:
    t: np.ndarray
    y: list
    error_estimate: float = 0.0
    n_steps: int = 0
    n_rejected: int = 0
    stats: dict = field(default_factory=dict)

    @property
    def final(self):
        return self.y[-1]


def rk_step(fun: Callable, t: float, y: np.ndarray, h: float, k1=None):
    """One Dormand-Prince step. Returns (y_new, err, K) with K the stage stack."""
    K = [None] * 7
    K[0] = fun(t, y) if k1 is None else k1
    for s in range(1, 7):
        dy = sum(a * K[j] for j, a in enumerate(A[s]) if a != 0)
        K[s] = fun(t + C[s] * h, y + h * dy)
    y_new = y + h * sum(b * K[j] for j, b in enumerate(B) if b != 0)
    err = h * sum(e * K[j] for j, e in enumerate(E) if e != 0)
    return y_new, err, K


def dense_eval(y_old, K, h, theta):
    """Continuous extension inside the last step, ``theta`` in [0, 1]."""
    powers = np.array([theta, theta**2, theta**3, theta**4])
    w = P @ powers
    return y_old + h * sum(w[j] * K[j] for j in range(7) if w[j] != 0)


def _error_norm(err, y, y_new, rtol, atol):
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return float(np.sqrt(np.mean(np.abs(err / scale) ** 2)))


def initial_step(fun, t0, y0, f0, rtol, atol, direction=1.0):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean(np.abs(y0 / scale) ** 2))
    d1 = np.sqrt(np.mean(np.abs(f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + direction * h0 * f0
    f1 = fun(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(np.abs((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / ORDER)
    return min(100 * h0, h1)


class Stepper:
    """Adaptive Dormand-Prince stepper with FSAL and dense output.

    ``max_step`` caps the step; the step is clipped so that ``t_bound`` is
    hit exactly.
    """

    def __init__(self, fun, t0, y0, t_bound, rtol=1e-8, atol=1e-10,
                 h0=None, max_step=np.inf, min_step=1e-14):
        self.fun = fun
        self.t = float(t0)
        self.y = np.asarray(y0, dtype=complex)
        self.t_bound = float(t_bound)
        self.rtol, self.atol = rtol, atol
        self.max_step = max_step
        self.min_step = min_step
        self.f = fun(self.t, self.y)
        if h0 is None:
            h0 = initial_step(fun, self.t, self.y, self.f, rtol, atol) if t_bound > t0 else 0.0
        self.h = min(h0, max_step)
        self.n_steps = 0
        self.n_rejected = 0
        self.error_estimate = 0.0
        # last accepted step, for dense output
        self.t_old = self.t
        self.y_old = self.y
        self.K = None
        self.h_last = 0.0

    @property
    def done(self) -> bool:
        return self.t >= self.t_bound

    def step(self) -> None:
        t, y = self.t, self.y
        proposed = min(self.h, self.max_step)
        h = min(proposed, self.t_bound - t)
        clipped = h < proposed
        while True:
            if h < self.min_step * max(1.0, abs(t)):
                raise IntegrationError("step size underflow", t)
            y_new, err, K = rk_step(self.fun, t, y, h, k1=self.f)
            en = _error_norm(err, y, y_new, self.rtol, self.atol)
            if en <= 1.0:
                break
            self.n_rejected += 1
            clipped = False
            h *= max(MIN_FACTOR, SAFETY * en ** (-1 / ORDER))
        factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, SAFETY * en ** (-1 / ORDER))
        self.t_old, self.y_old, self.K, self.h_last = t, y, K, h
        t_new = t + h
        if self.t_bound - t_new < 1e-12 * max(1.0, abs(t_new)):
            t_new = self.t_bound
        self.t, self.y = t_new, y_new
        self.f = self.fun(t_new, y_new)
        self.h = max(h * factor, proposed) if clipped else h * factor
        self.n_steps += 1
        self.error_estimate += float(np.max(np.abs(err))) if err.size else 0.0

    def dense(self, t: float) -> np.ndarray:
        if self.K is None or self.h_last == 0:
            return self.y
        theta = (t - self.t_old) / self.h_last
        return dense_eval(self.y_old, self.K, self.h_last, theta)

    def restart(self, t: float, y: np.ndarray) -> None:
        """Continue from an externally modified state (e.g. after a jump)."""
        self.t = float(t)
        self.y = np.asarray(y, dtype=complex)
        self.f = self.fun(self.t, self.y)
        self.K = None


def integrate(fun: Callable, t0: float, y0, t1: float, rtol: float = 1e-8,
              atol: float = 1e-10, t_eval=None, h0=None, max_step=np.inf) -> Solution:
    """Integrate ``dy/dt = fun(t, y)`` from ``t0`` to ``t1``.

    With ``t_eval`` the state is returned at those (sorted) times, landing on
    each exactly; otherwise only the final state is stored.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    y0 = np.asarray(y0, dtype=complex)
    targets = [t1] if t_eval is None else list(t_eval)
    if targets and (targets[0] < t0 or targets[-1] > t1 + 1e-12):
        raise ValueError("t_eval outside integration interval")
    ts, ys = [], []
    st = Stepper(fun, t0, y0, t1, rtol=rtol, atol=atol, h0=h0, max_step=max_step)
    for target in targets:
        if target <= st.t:
            ts.append(target)
            ys.append(st.y.copy() if target == st.t else st.dense(target))
            continue
        st.t_bound = target
        while not st.done:
            st.step()
        ts.append(target)
        ys.append(st.y.copy())
    return Solution(np.array(ts), ys, st.error_estimate, st.n_steps, st.n_rejected)


def integrate_fixed(fun: Callable, t0: float, y0, t1: float, n_steps: int) -> np.ndarray:
    """Fixed-step fifth-order integration; used for order checks."""
    y = np.asarray(y0, dtype=complex)
    h = (t1 - t0) / n_steps
    t = t0
    for _ in range(n_steps):
        y, _, _ = rk_step(fun, t, y, h)
        t += h
    return y
