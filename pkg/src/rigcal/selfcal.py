"""Initial focal-length estimation from fundamental-matrix singular values.

A true essential matrix has two equal singular values and a zero third one.
For every available view pair we form E = K_j^T F_ij K_i from the current
focal guesses (principal points fixed at the image centers), normalize E to
unit Frobenius norm, and penalize both the singular-value gap and the third
singular value:

    r_ij = w_ij * ((s1 - s2) / (s1 + s2) + s3)

The per-view focal lengths (log-parameterized, shared by both axes) are
found by Levenberg-Marquardt over the stacked residual vector, one entry per
undirected pair, weighted by each pair's match count relative to the maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ba import LmOptions, lm_least_squares
from .geometry import calibration_matrix


class SelfCalError(ValueError):
    pass


class UnconstrainedView(SelfCalError):
    """A view participates in no pair and its focal cannot be estimated."""


@dataclass(frozen=True)
class FocalPair:
    i: str
    j: str
    F: np.ndarray           # x_j^T F x_i = 0, pixel coordinates
    match_count: int


@dataclass
class FocalProblem:
    """Joint focal estimation over one view set.

    ``image_sizes`` maps view id to (width, height); weights derive from the
    match counts: w_ij = count_ij / max over all pairs.
    """

    pairs: list
    image_sizes: dict

    def __post_init__(self):
        if not self.pairs:
            raise SelfCalError("no pairs to calibrate from")
        views_in_pairs = {v for p in self.pairs for v in (p.i, p.j)}
        for v in self.image_sizes:
            if v not in views_in_pairs:
                raise UnconstrainedView(f"view {v!r} appears in no pair")
        for p in self.pairs:
            for v in (p.i, p.j):
                if v not in self.image_sizes:
                    raise SelfCalError(f"pair references unknown view {v!r}")

    @property
    def weights(self) -> np.ndarray:
        counts = np.array([p.match_count for p in self.pairs], dtype=float)
        return counts / counts.max()


@dataclass
class FocalSolution:
    focals: dict
    cost: float
    iterations: int
    converged: bool


def focal_residual(F: np.ndarray, f_i: float, f_j: float,
                   pp_i: tuple, pp_j: tuple, weight: float = 1.0) -> float:
    """Singular-value residual of the implied essential matrix.

    Exactly zero iff E = K_j^T F K_i (unit Frobenius norm) has singular
    values (s, s, 0); invariant to rescaling F.
    """
    r, _, _ = _residual_and_svd(F, f_i, f_j, pp_i, pp_j)
    return weight * r


def _residual_and_svd(F, f_i, f_j, pp_i, pp_j):
    K_i = calibration_matrix(f_i, *pp_i)
    K_j = calibration_matrix(f_j, *pp_j)
    E_raw = K_j.T @ F @ K_i
    norm = np.linalg.norm(E_raw)
    if norm == 0:
        raise SelfCalError("zero essential matrix")
    E = E_raw / norm
    u, s, vt = np.linalg.svd(E)
    r = (s[0] - s[1]) / (s[0] + s[1]) + s[2]
    return float(r), (E, u, s, vt, norm), (K_i, K_j)


def _residual_gradient(F, f_i, f_j, pp_i, pp_j):
    """(residual, d r / d log f_i, d r / d log f_j), analytic via SVD."""
    r, (E, u, s, vt, norm), (K_i, K_j) = _residual_and_svd(F, f_i, f_j, pp_i, pp_j)
    sel_i = np.diag([1.0, 1.0, 0.0])
    dE_raw_dfi = K_j.T @ F @ sel_i
    dE_raw_dfj = sel_i @ F @ K_i

    def sv_grads(dE_raw):
        # E = E_raw / |E_raw| : dE = (dE_raw - E <E, dE_raw>) / |E_raw|
        inner = float(np.sum(E * dE_raw))
        dE = (dE_raw - E * inner) / norm
        return np.array([u[:, k] @ dE @ vt[k, :] for k in range(3)])

    dsig_dfi = sv_grads(dE_raw_dfi)
    dsig_dfj = sv_grads(dE_raw_dfj)
    s12 = s[0] + s[1]
    dr_ds = np.array([2.0 * s[1] / (s12 * s12), -2.0 * s[0] / (s12 * s12), 1.0])
    return r, f_i * float(dr_ds @ dsig_dfi), f_j * float(dr_ds @ dsig_dfj)


def init_focals(problem: FocalProblem, max_iterations: int = 200) -> FocalSolution:
    """Estimate per-view focal lengths from the pair fundamental matrices.

    Starts from the field-of-view prior 1.2 * max(width, height) per view and
    runs Levenberg-Marquardt over log-focals until the relative cost decrease
    is below 1e-10. ``converged=False`` flags a run that exhausted its
    iteration budget.
    """
    views = sorted(problem.image_sizes)
    index = {v: k for k, v in enumerate(views)}
    centers = {v: ((problem.image_sizes[v][0] - 1) / 2.0,
                   (problem.image_sizes[v][1] - 1) / 2.0)
               for v in views}
    weights = problem.weights
    x0 = np.array([math.log(1.2 * max(problem.image_sizes[v])) for v in views])

    def fun(x):
        f = np.exp(x)
        r = np.zeros(len(problem.pairs))
        J = np.zeros((len(problem.pairs), len(views)))
        for k, p in enumerate(problem.pairs):
            ii, jj = index[p.i], index[p.j]
            rk, gi, gj = _residual_gradient(p.F, f[ii], f[jj], centers[p.i], centers[p.j])
            r[k] = weights[k] * rk
            J[k, ii] += weights[k] * gi
            J[k, jj] += weights[k] * gj
        return r, J

    res = lm_least_squares(fun, x0, LmOptions(max_iterations=max_iterations, ftol=1e-10))
    focals = {v: float(math.exp(res.x[index[v]])) for v in views}
    return FocalSolution(focals=focals, cost=res.cost, iterations=res.iterations,
                         converged=res.converged)
