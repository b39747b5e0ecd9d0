"""Constrained mean-field inference for the binary dense CRF.

The factorised posterior ``q_j = [q_j(0), q_j(1)]`` minimises

    F(q) = sum_j (q_j . log q_j + q_j . a_j) + 1/2 sum_{j != k} W_jk [q_j(0) q_k(1) + q_j(1) q_k(0)]

optionally subject to ``sum_j q_j(1) = tau * m``.  ``W`` is the weighted sum
of the two Gaussian kernels.  Because the full kernel matrix (self-pairs
included) is positive semi-definite, the Potts term splits into a concave
part ``-1/2 sum_l q_l^T W_full q_l`` and a convex self-correction
``alpha/2 sum_j |q_j|^2`` with ``alpha = alpha_ap + alpha_sm``.  Each CCCP
step linearises the concave part at the current ``q`` and solves the convex
remainder exactly, pixel by pixel, with one scalar Lagrange multiplier
carrying the mass constraint.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import expit, xlogy

from .energy import CrfParams, KernelFeatures, kernel_matrix
from .permutohedral import Lattice, build_lattice

EARLY_STOP = 1e-5
# below this many pixels the dense kernel is cheaper than two lattices and
# keeps the descent guarantee exact
EXACT_LIMIT = 1024


@dataclass
class MarginalField:
    q: np.ndarray  # (m, 2), rows sum to one
    target_mass: float | None = None
    lam: float | None = None

    @property
    def foreground_mass(self) -> float:
        return float(self.q[:, 1].sum())

    def decode(self) -> np.ndarray:
        """Marginal mode per pixel; ties resolve to label 0."""
        return (self.q[:, 1] > self.q[:, 0]).astype(np.uint8)


def _from_logit(z: np.ndarray) -> np.ndarray:
    p = expit(z)
    return np.column_stack([1.0 - p, p])


def init_marginals(a: np.ndarray) -> MarginalField:
    """Independent softmax of the negated effective unaries."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("effective unaries must be finite")
    return MarginalField(_from_logit(a[:, 0] - a[:, 1]))


class LatticePairwise:
    """Kernel products ``sum_{k != j} W_jk v_k`` through two lattice filters."""

    def __init__(self, lattice_ap: Lattice, lattice_sm: Lattice, alpha_ap: float, alpha_sm: float):
        if lattice_ap.n_points != lattice_sm.n_points:
            raise ValueError("lattices are built over different point counts")
        self.lattice_ap = lattice_ap
        self.lattice_sm = lattice_sm
        self.alpha_ap = alpha_ap
        self.alpha_sm = alpha_sm
        self.n_points = lattice_ap.n_points

    def apply(self, values: np.ndarray) -> np.ndarray:
        out = np.zeros_like(values, dtype=np.float64)
        if self.alpha_ap:
            out += self.alpha_ap * self.lattice_ap.filter(values)
        if self.alpha_sm:
            out += self.alpha_sm * self.lattice_sm.filter(values)
        # the filters include k = j with unit self-weight
        return out - (self.alpha_ap + self.alpha_sm) * values


class DensePairwise:
    """Exact kernel products from the dense O(m^2) weight matrix."""

    def __init__(self, weight: np.ndarray):
        self.weight = weight
        self.n_points = weight.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.weight @ values


def pairwise_operator(feats: KernelFeatures, params: CrfParams, method: str = "auto"):
    if method == "auto":
        method = "exact" if feats.appearance.shape[0] <= EXACT_LIMIT else "lattice"
    if method == "lattice":
        return LatticePairwise(
            build_lattice(feats.appearance),
            build_lattice(feats.smoothness),
            params.alpha_ap,
            params.alpha_sm,
        )
    if method == "exact":
        return DensePairwise(kernel_matrix(feats, params))
    raise ValueError(f"unknown message method {method!r}")


def messages(q: np.ndarray, kernel) -> np.ndarray:
    """msg_j(l) = sum_{k != j} W_jk q_k(1 - l) for binary labels."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[0] != kernel.n_points:
        raise ValueError(f"{q.shape[0]} marginals for {kernel.n_points} kernel points")
    return kernel.apply(q)[:, ::-1]


def compute_messages(
    q: np.ndarray, lattice_ap: Lattice, lattice_sm: Lattice, alpha_ap: float, alpha_sm: float
) -> np.ndarray:
    q = q.q if isinstance(q, MarginalField) else q
    return messages(q, LatticePairwise(lattice_ap, lattice_sm, alpha_ap, alpha_sm))


@lru_cache(maxsize=16)
def _inverse_table(coupling: float) -> tuple[np.ndarray, np.ndarray]:
    z = np.linspace(-40.0, 40.0, 8001)
    return z + coupling * (2.0 * expit(z) - 1.0), z


def coupled_logit(t: np.ndarray, coupling: float) -> np.ndarray:
    """Solve ``z + coupling * (2 sigmoid(z) - 1) = t`` elementwise.

    The left side is strictly increasing with slope in [1, 1 + coupling/2],
    and the root lies within ``coupling`` of ``t``.
    """
    t = np.asarray(t, dtype=np.float64)
    if coupling == 0:
        return t.copy()
    lo = t - coupling
    hi = t + coupling
    table_t, table_z = _inverse_table(float(coupling))
    z = np.interp(t, table_t, table_z)
    outside = (t < table_t[0]) | (t > table_t[-1])
    z[outside] = t[outside] - coupling * np.sign(t[outside])
    tol = 1e-14 * (1.0 + np.abs(t) + coupling)
    for it in range(200):
        s = expit(z)
        resid = z + coupling * (2.0 * s - 1.0) - t
        if np.all(np.abs(resid) <= tol):
            break
        lo = np.where(resid < 0, z, lo)
        hi = np.where(resid > 0, z, hi)
        newton = z - resid / (1.0 + 2.0 * coupling * s * (1.0 - s))
        # Newton can oscillate around the inflection point when started far
        # away; after a few steps fall back to bisection where it has not
        # yet settled
        bisect = (newton < lo) | (newton > hi)
        if it >= 4:
            bisect |= np.abs(resid) > 1e-6
        z = np.where(bisect, 0.5 * (lo + hi), newton)
    return z


def solve_lambda(
    b: np.ndarray, target_mass: float, tol: float = 0.0, coupling: float = 0.0
) -> float:
    """Shift ``lam`` such that ``sum_j p_j(b_j + lam)`` equals ``target_mass``.

    ``p`` is the logistic function for ``coupling == 0``, otherwise the
    inverse of ``logit(p) + coupling * (2p - 1)``.  The mass is strictly
    increasing in ``lam``: the root is bracketed from [-30, 30] by doubling
    and then refined by Newton steps that fall back to bisection whenever
    they leave the bracket.  With ``tol == 0`` iteration stops only when the
    bracket can no longer shrink.
    """
    b = np.asarray(b, dtype=np.float64)
    m = b.shape[0]
    if not 0.0 < target_mass < m:
        raise ValueError(f"target mass {target_mass} outside (0, {m})")

    def mass(lam: float) -> tuple[float, float]:
        p = expit(coupled_logit(b + lam, coupling))
        v = p * (1.0 - p)
        return float(p.sum()), float(np.sum(v / (1.0 + 2.0 * coupling * v)))

    lo, hi = -30.0, 30.0
    while mass(lo)[0] > target_mass:
        lo *= 2.0
    while mass(hi)[0] < target_mass:
        hi *= 2.0
    lam = 0.5 * (lo + hi)
    for _ in range(200):
        g, slope = mass(lam)
        if g == target_mass or abs(g - target_mass) < tol:
            break
        if g < target_mass:
            lo = lam
        else:
            hi = lam
        nxt = lam - (g - target_mass) / slope if slope > 0 else lo - 1.0
        if not lo < nxt < hi:
            nxt = 0.5 * (lo + hi)
        if nxt == lam or nxt in (lo, hi):
            break
        lam = nxt
    return lam


def cccp_step(
    q: MarginalField | np.ndarray,
    a: np.ndarray,
    kernel,
    params: CrfParams,
    target_mass: float | None = None,
) -> MarginalField:
    """One concave-convex step from ``q``; see the module docstring."""
    q_arr = q.q if isinstance(q, MarginalField) else np.asarray(q, dtype=np.float64)
    alpha = params.alpha_total
    if alpha:
        msg = messages(q_arr, kernel)
        b = -(a[:, 1] - a[:, 0]) - (msg[:, 1] - msg[:, 0]) + alpha * (2.0 * q_arr[:, 1] - 1.0)
    else:
        b = a[:, 0] - a[:, 1]
    if target_mass is None:
        return MarginalField(_from_logit(coupled_logit(b, alpha)))
    lam = solve_lambda(b, target_mass, coupling=alpha)
    return MarginalField(_from_logit(coupled_logit(b + lam, alpha)), target_mass, lam)


def kl_objective(q: np.ndarray, a: np.ndarray, feats: KernelFeatures, params: CrfParams) -> float:
    """Exact variational objective without the log-partition constant."""
    q = q.q if isinstance(q, MarginalField) else np.asarray(q, dtype=np.float64)
    weight = kernel_matrix(feats, params)
    entropy_term = float(np.sum(xlogy(q, q)))
    unary_term = float(np.sum(q * a))
    pairwise = float(q[:, 0] @ weight @ q[:, 1])  # 1/2 sum_{j != k} of both cross terms
    return entropy_term + unary_term + pairwise


def run_inference(
    a: np.ndarray,
    feats: KernelFeatures,
    params: CrfParams,
    tau: float | None = None,
    y_star: int = 1,
    method: str = "auto",
    kernel=None,
    callback: Callable[[int, MarginalField], None] | None = None,
) -> tuple[MarginalField, np.ndarray]:
    """Mean-field inference followed by marginal-mode decoding.

    With ``y_star == 0`` the coupling term pins every pixel to no-change, so
    the solver returns the all-background field without iterating.
    """
    a = np.asarray(a, dtype=np.float64)
    m = a.shape[0]
    if y_star == 0:
        q = np.zeros((m, 2))
        q[:, 0] = 1.0
        field = MarginalField(q)
        return field, field.decode()
    target = None
    if tau is not None:
        if not 0.0 < tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        target = tau * m
    if kernel is None and params.alpha_total:
        kernel = pairwise_operator(feats, params, method)

    field = init_marginals(a)
    for it in range(params.mf_iters):
        new = cccp_step(field, a, kernel, params, target)
        change = float(np.max(np.abs(new.q - field.q)))
        field = new
        if callback is not None:
            callback(it, field)
        if change < EARLY_STOP:
            break
    return field, field.decode()
