"""Blahut-Arimoto channels, rate-distortion frontier tracing, and signatures.

For a distortion matrix rho and inverse temperature lam, the BA fixed point
alternates

    q(y|x) proportional to p(y) * exp(-lam * rho(x, y))
    p(y)   = sum_x p(x) q(y|x)

until the channel stops moving. Sweeping lam over a log-spaced grid traces the
parametric frontier (R(lam), D(lam)); the geometric summary is the median
finite-difference slope (beta), the variance of those slopes (kappa), and the
trapezoidal area under R(D) (auc).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .channels import Channel, mutual_information, uniform_prior
from .errors import DegenerateFrontier, NotConverged, OutOfBracket

BA_TOL = 1e-10
BA_MAX_ITER = 10000
SEGMENT_MIN_DD = 1e-12   # |Delta D| below this is a degenerate segment
_DEDUP_TOL = 1e-12


def default_lambda_grid(n: int = 60, lo: float = 1e-1, hi: float = 1e3) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), n)


@dataclass(frozen=True)
class DistortionMatrix:
    """Nonnegative K x K cost matrix with zero diagonal."""

    rho: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rho, dtype=np.float64)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError(f"rho must be square, got shape {r.shape}")
        if np.any(r < 0):
            raise ValueError("rho entries must be nonnegative")
        if np.any(np.diag(r) != 0):
            raise ValueError("rho diagonal must be zero")
        object.__setattr__(self, "rho", r)

    @property
    def K(self) -> int:
        return self.rho.shape[0]


@dataclass(frozen=True)
class BAResult:
    channel: Channel
    converged: bool
    iterations: int


@dataclass(frozen=True)
class RDPoint:
    lam: float
    rate: float
    distortion: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class RDFrontier:
    points: tuple
    prior: np.ndarray

    def __post_init__(self):
        lams = [p.lam for p in self.points]
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise ValueError("frontier lambda values must be strictly increasing")

    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points])

    def distortions(self) -> np.ndarray:
        return np.array([p.distortion for p in self.points])


@dataclass(frozen=True)
class RDSignatures:
    beta: float
    beta_abs: float
    kappa: float
    auc: float
    n_segments: int
    # kappa is the (n-1)-denominator sample variance of local slopes
    kappa_estimator: str = "sample"


@njit(cache=True)
def _ba_sweeps(rho, lam, px, py0, tol, max_iter):
    """Alternating BA updates; returns (q, py, converged, iterations).

    Convergence: max |q - q_prev| < tol between sweeps. The output marginal is
    floored at 1e-300 so trailing classes underflow gracefully instead of
    producing 0/0 (rho's zero diagonal keeps every row partition positive).
    """
    K = rho.shape[0]
    E = np.empty((K, K))
    for i in range(K):
        for j in range(K):
            E[i, j] = np.exp(-lam * rho[i, j])
    py = py0.copy()
    q = np.empty((K, K))
    qold = np.zeros((K, K))
    conv = False
    it_used = 0
    for it in range(1, max_iter + 1):
        it_used = it
        for i in range(K):
            z = 0.0
            for j in range(K):
                v = py[j] * E[i, j]
                q[i, j] = v
                z += v
            for j in range(K):
                q[i, j] /= z
        for j in range(K):
            s = 0.0
            for i in range(K):
                s += px[i] * q[i, j]
            py[j] = s if s > 1e-300 else 1e-300
        dmax = 0.0
        for i in range(K):
            for j in range(K):
                d = abs(q[i, j] - qold[i, j])
                if d > dmax:
                    dmax = d
                qold[i, j] = q[i, j]
        if dmax < tol:
            conv = True
            break
    return q, py, conv, it_used


def _as_rho(rho) -> np.ndarray:
    if isinstance(rho, DistortionMatrix):
        return rho.rho
    return DistortionMatrix(np.asarray(rho, dtype=np.float64)).rho


def _rate_and_distortion(q: np.ndarray, px: np.ndarray, rho: np.ndarray):
    ch = Channel(q, px)
    R = mutual_information(ch)
    D = float(np.sum(px[:, None] * q * rho))
    return ch, R, D


def ba_channel(rho, lam: float, prior=None, tol: float = BA_TOL,
               max_iter: int = BA_MAX_ITER, init_py=None) -> BAResult:
    """Solve the BA fixed point at one inverse temperature.

    The output marginal is initialized at the prior (or at ``init_py`` for a
    warm start). Raises NotConverged carrying the last iterate as a BAResult;
    callers that accept unconverged channels catch it and read ``.result``.
    """
    r = _as_rho(rho)
    if lam <= 0:
        raise ValueError("lam must be positive")
    if tol <= 0:
        raise ValueError("tol must be positive")
    px = uniform_prior(r.shape[0]) if prior is None else np.asarray(prior, dtype=np.float64)
    py0 = px.copy() if init_py is None else np.asarray(init_py, dtype=np.float64).copy()
    q, _, conv, iters = _ba_sweeps(r, lam, px, py0, tol, max_iter)
    ch, _, _ = _rate_and_distortion(q, px, r)
    result = BAResult(ch, conv, iters)
    if not conv:
        raise NotConverged(result, iters)
    return result


def trace_frontier(rho, lambda_grid=None, prior=None, tol: float = BA_TOL,
                   max_iter: int = BA_MAX_ITER) -> RDFrontier:
    """Sweep lam over the grid, warm-starting each solve from the previous one.

    Non-converged points are kept, flagged, and never abort the sweep.
    """
    r = _as_rho(rho)
    grid = default_lambda_grid() if lambda_grid is None else np.asarray(lambda_grid, dtype=np.float64)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("lambda grid must be a nonempty 1-d array")
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ValueError("lambda grid must be positive and strictly increasing")
    px = uniform_prior(r.shape[0]) if prior is None else np.asarray(prior, dtype=np.float64)
    py = px.copy()
    points = []
    for lam in grid:
        q, py_out, conv, iters = _ba_sweeps(r, float(lam), px, py, tol, max_iter)
        py = py_out  # warm start the next lam
        _, R, D = _rate_and_distortion(q, px, r)
        points.append(RDPoint(float(lam), R, D, bool(conv), int(iters)))
    return RDFrontier(tuple(points), px)


def signatures(frontier: RDFrontier) -> RDSignatures:
    """beta / kappa / auc from a traced frontier.

    Finite differences run over consecutive lam-ordered points; segments with
    |Delta D| < 1e-12 are excluded. Raises DegenerateFrontier when fewer than
    two usable segments remain.
    """
    R = frontier.rates()
    D = frontier.distortions()
    dR = np.diff(R)
    dD = np.diff(D)
    usable = np.abs(dD) >= SEGMENT_MIN_DD
    slopes = dR[usable] / dD[usable]
    if len(slopes) < 2:
        raise DegenerateFrontier(f"only {len(slopes)} usable segments")
    beta = float(np.median(slopes))
    kappa = float(np.var(slopes, ddof=1))
    order = np.argsort(D, kind="stable")
    Ds = D[order]
    Rs = R[order]
    keep = np.concatenate([[True], np.diff(Ds) > _DEDUP_TOL])
    Ds = Ds[keep]
    Rs = Rs[keep]
    auc = float(np.trapezoid(Rs, Ds))
    return RDSignatures(beta=beta, beta_abs=abs(beta), kappa=kappa, auc=auc,
                        n_segments=int(len(slopes)))


def operating_point_slope(rho, target_rate: float, prior=None,
                          bracket=(1e-3, 1e5), tol: float = 1e-6,
                          max_bisect: int = 200) -> float:
    """Find lam* with R(lam*) = target_rate by bisection on log lam.

    R(lam) is nondecreasing, so bisection is valid. Raises OutOfBracket when
    the target rate is not attainable inside the bracket.
    """
    r = _as_rho(rho)
    K = r.shape[0]
    px = uniform_prior(K) if prior is None else np.asarray(prior, dtype=np.float64)
    lo, hi = float(bracket[0]), float(bracket[1])
    if not (0 < lo < hi):
        raise ValueError("bracket must satisfy 0 < lo < hi")
    if target_rate >= np.log(K):
        raise OutOfBracket(f"target rate {target_rate!r} >= ln K = {np.log(K)!r}")
    if target_rate <= 0:
        raise OutOfBracket(f"target rate {target_rate!r} <= 0")

    def rate_at(lam: float) -> float:
        q, _, _, _ = _ba_sweeps(r, lam, px, px.copy(), BA_TOL, BA_MAX_ITER)
        _, R, _ = _rate_and_distortion(q, px, r)
        return R

    r_lo = rate_at(lo)
    r_hi = rate_at(hi)
    if target_rate < r_lo - tol or target_rate > r_hi + tol:
        raise OutOfBracket(
            f"target rate {target_rate!r} outside achievable [{r_lo!r}, {r_hi!r}]")
    if abs(r_lo - target_rate) <= tol:
        return lo
    if abs(r_hi - target_rate) <= tol:
        return hi
    a, b = np.log(lo), np.log(hi)
    for _ in range(max_bisect):
        mid = 0.5 * (a + b)
        r_mid = rate_at(np.exp(mid))
        if abs(r_mid - target_rate) <= tol:
            return float(np.exp(mid))
        if r_mid < target_rate:
            a = mid
        else:
            b = mid
    raise OutOfBracket("bisection exhausted without reaching the target rate")


def _lagrangian_trace(rho, lam: float, prior=None, n_sweeps: int = 50):
    """Per-sweep Lagrangian D + R/lam (pure-python reference, for tests).

    Mirrors _ba_sweeps step by step so the monotone-descent property of the
    alternating updates can be asserted against the production kernel.
    """
    r = _as_rho(rho)
    px = uniform_prior(r.shape[0]) if prior is None else np.asarray(prior, dtype=np.float64)
    E = np.exp(-lam * r)
    py = px.copy()
    out = []
    for _ in range(n_sweeps):
        q = py[None, :] * E
        q /= q.sum(axis=1, keepdims=True)
        py = np.maximum(px @ q, 1e-300)
        _, R, D = _rate_and_distortion(q, px, r)
        out.append(D + R / lam)
    return out
