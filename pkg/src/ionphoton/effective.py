"""Adiabatic elimination of far-detuned excited states.

The short-lived P manifolds are detuned from every drive by far more than
their linewidth, so their amplitudes follow the ground-state amplitudes
instantaneously. Eliminating them leaves a slow model on the remaining
(long-lived) states with

* an effective Hamiltonian containing light shifts and Raman couplings, and
* effective collapse operators for scattering through the excited states.

Each excited-state coupling ``V_j`` (static or carried by a drive with
carrier ``nu_j``) contributes the response ``M_j = (H_nh - e_g - nu_j)^-1 V_j``
column by column, where ``H_nh = H_E - (i/2) Lambda_E`` and ``e_g`` is the
bare energy of the ground state being coupled. Then::

    H_eff = H_GG - 1/2 sum_{j', j} conj(s_j') s_j e^{-i(nu_j - nu_j')t} V_j'^+ M_j + h.c.
    L_eff = L_GG - sum_j s_j e^{-i nu_j t} L_GE M_j

Cavity decay of excited states (a jump between two eliminated states) is
dropped; its rate is tiny compared with the excited-state linewidth.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .dynamics import (CollapseChannel, Component, DrivenTerm, DynamicChannel, Problem,
                       _conj, _conj_product)


class EliminationError(ValueError):
    pass


def _block(m, rows, cols) -> np.ndarray:
    return sp.csr_matrix(m)[rows][:, cols].toarray()


def eliminate(problem: Problem, excited_mask, min_detuning: float = 0.0):
    """Eliminate the states flagged by ``excited_mask``.

    Returns ``(reduced_problem, ground_indices)``; operators of the reduced
    problem act on ``ground_indices`` of the input space. With
    ``min_detuning > 0`` an :class:`EliminationError` is raised when some
    coupled excited state lies closer than that to its drive resonance.
    """
    if problem.extra_loss is not None or problem.dynamic_loss:
        raise EliminationError("eliminate before restricting the problem")
    if any(not isinstance(c, CollapseChannel) for c in problem.channels):
        raise EliminationError("input channels must be static")
    mask = np.asarray(excited_mask, dtype=bool)
    if mask.shape != (problem.dim,):
        raise ValueError("excited_mask must flag every basis state")
    E, G = np.nonzero(mask)[0], np.nonzero(~mask)[0]
    h0 = problem.h0
    e_ground = h0.diagonal().real[G]

    # couplings ground -> excited as (block, slow, carrier, weight)
    vs = []
    v0 = _block(h0, E, G)
    if np.any(v0):
        vs.append((v0, None, 0.0, 1.0))
    terms = []
    for t in problem.terms:
        r = t.operator
        up, down = _block(r, E, G), _block(r.conj().T, E, G)
        if np.any(up):
            vs.append((up, t.slow, t.frequency, t.weight))
        if np.any(down):
            vs.append((down, _conj(t.slow), -t.frequency, t.weight))
        if abs(sp.csr_matrix(r)[E][:, E]).sum() > 0:
            raise EliminationError(f"term {t.label!r} couples excited states")
        gg = sp.csr_matrix(r)[G][:, G]
        if gg.nnz:
            terms.append(DrivenTerm(gg, t.slow, t.frequency, t.label, t.weight))

    h_e = _block(h0, E, E)
    loss_e = _block(problem.loss_operator(), E, E)
    h_nh = h_e - 0.5j * loss_e
    eye = np.eye(len(E))
    responses = []
    for v, slow, nu, w in vs:
        m = np.zeros_like(v, dtype=complex)
        for k in np.nonzero(np.any(v != 0, axis=0))[0]:
            a = h_nh - (e_ground[k] + nu) * eye
            if min_detuning > 0:
                coupled = np.abs(v[:, k]) > 0
                gap = np.abs(np.diag(h_e)[coupled] - e_ground[k] - nu)
                if gap.size and gap.min() < min_detuning:
                    raise EliminationError(
                        f"excited state within {gap.min():.3g} rad/us of resonance")
            m[:, k] = np.linalg.solve(a, v[:, k])
        responses.append(m)

    for (vp, sp_, nup, wp), _ in zip(vs, responses):
        for (v, s, nu, w), m in zip(vs, responses):
            op = -0.5 * (vp.conj().T @ m)
            op[np.abs(op) < 1e-14 * max(1.0, np.abs(op).max(initial=0.0))] = 0.0
            if not np.any(op):
                continue
            terms.append(DrivenTerm(sp.csr_matrix(op), _conj_product(sp_, s), nu - nup,
                                    "eff", wp * w))

    channels = []
    for c in problem.channels:
        parts = []
        lgg = _block(c.operator, G, G)
        if np.any(lgg):
            parts.append(Component(sp.csr_matrix(lgg)))
        lge = _block(c.operator, G, E)
        if np.any(lge):
            for (v, s, nu, w), m in zip(vs, responses):
                op = -(lge @ m)
                if np.any(np.abs(op) > 1e-14):
                    parts.append(Component(sp.csr_matrix(op), s, nu))
        if not parts:
            continue
        if len(parts) == 1 and parts[0].slow is None and parts[0].frequency == 0:
            channels.append(CollapseChannel(parts[0].operator, c.rate, c.label))
        else:
            channels.append(DynamicChannel(parts, c.rate, c.label))
    return Problem(sp.csr_matrix(_block(h0, G, G)), terms, channels), G
