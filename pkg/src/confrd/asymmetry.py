"""Directional asymmetry of a channel.

Three views of the same question -- "is confusing i for j as likely as
confusing j for i?":

* global magnitude  ||C - C^T||_F / ||C||_F
* off-diagonal magnitude, same ratio after zeroing the diagonal
* a breadth/strength decomposition over class pairs: how many pairs are
  directionally imbalanced beyond a threshold (breadth), and how large the
  imbalance is among those pairs (strength).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .channels import Channel, zero_diagonal
from .errors import DiagonalOnly

# default pair thresholds: empirical blocks suppress float noise only;
# simulation channels use a looser cutoff because sampled frequencies are
# rational with denominator n_per_row.
EPS_EMPIRICAL = 1e-12
EPS_SIMULATION = 1e-6


@dataclass(frozen=True)
class PairDecomposition:
    n_pairs: int
    f_pairs: float
    mean_delta: Optional[float]  # None when no pair clears the threshold
    epsilon: float


@dataclass(frozen=True)
class AsymmetrySummary:
    frobenius_index: float
    offdiag_frobenius: Optional[float]  # None when the diagonal holds all mass
    n_pairs: int
    f_pairs: float
    mean_delta: Optional[float]
    epsilon: float


def frobenius_asymmetry(ch: Channel) -> float:
    """||C - C^T||_F / ||C||_F."""
    C = ch.C
    return float(np.linalg.norm(C - C.T) / np.linalg.norm(C))


def offdiag_frobenius_asymmetry(ch: Channel) -> float:
    """Same ratio on the diagonal-zeroed matrix.

    Raises DiagonalOnly when the channel has no off-diagonal mass (such a
    block belongs to the collapse filter, not here).
    """
    C0 = zero_diagonal(ch).C0
    denom = np.linalg.norm(C0)
    if denom == 0.0:
        raise DiagonalOnly("channel has no off-diagonal mass")
    return float(np.linalg.norm(C0 - C0.T) / denom)


def pair_decomposition(ch: Channel, epsilon: float = EPS_EMPIRICAL) -> PairDecomposition:
    """Breadth and strength of directional confusion over class pairs.

    n_pairs = #{i<j : |C_ij - C_ji| > epsilon}; f_pairs normalizes by C(K,2);
    mean_delta is the mean |C_ij - C_ji| over counted pairs (absent when none).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    C = ch.C
    K = ch.K
    iu = np.triu_indices(K, 1)
    delta = np.abs(C[iu] - C.T[iu])
    hit = delta > epsilon
    n_pairs = int(hit.sum())
    f_pairs = n_pairs / (K * (K - 1) / 2)
    mean_delta = float(delta[hit].mean()) if n_pairs > 0 else None
    return PairDecomposition(n_pairs, f_pairs, mean_delta, epsilon)


def summarize_asymmetry(ch: Channel, epsilon: float = EPS_EMPIRICAL) -> AsymmetrySummary:
    """All asymmetry metrics in one record (the per-block bundle)."""
    try:
        a_off = offdiag_frobenius_asymmetry(ch)
    except DiagonalOnly:
        a_off = None
    pd = pair_decomposition(ch, epsilon)
    return AsymmetrySummary(
        frobenius_index=frobenius_asymmetry(ch),
        offdiag_frobenius=a_off,
        n_pairs=pd.n_pairs,
        f_pairs=pd.f_pairs,
        mean_delta=pd.mean_delta,
        epsilon=epsilon,
    )
