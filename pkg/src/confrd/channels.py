"""Confusion counts as probabilistic channels.

A confusion matrix N_ij (stimulus class i, response class j) row-normalizes to
a conditional distribution C(j|i); together with a stimulus prior p(x) this is
a discrete memoryless channel. This module holds the data containers plus the
channel-level quantities the rest of the package consumes: mutual information
(in nats), collapse diagnostics, accuracy, and the diagonal-zeroed view.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ZeroRow

# collapse thresholds for near-deterministic channels
ENTROPY_COLLAPSE = 1e-3   # nats, mean row entropy below this flags the block
ROWMAX_COLLAPSE = 0.999   # mean row-maximum probability above this flags it

_ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class BlockKey:
    """Identity of one analysis block: experiment x condition x model instance.

    ``model_instance`` stays empty for human observers.
    """

    system_group: str
    experiment: str
    condition: str
    model_instance: str = ""

    def __post_init__(self):
        if not self.system_group or not self.experiment or not self.condition:
            raise ValueError("system_group, experiment and condition must be non-empty")

    def as_tuple(self) -> tuple:
        return (self.system_group, self.experiment, self.condition, self.model_instance)


@dataclass(frozen=True)
class ConfusionCounts:
    """Raw K x K response counts, rows = stimulus classes."""

    counts: np.ndarray
    block: Optional[BlockKey] = None

    def __post_init__(self):
        arr = np.asarray(self.counts)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"counts must be square, got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError("need at least 2 classes")
        if np.any(arr < 0):
            raise ValueError("counts must be nonnegative")
        if not np.any(arr.sum(axis=1) > 0):
            raise ValueError("at least one row must have positive sum")
        object.__setattr__(self, "counts", np.array(arr, dtype=np.int64))

    @property
    def K(self) -> int:
        return self.counts.shape[0]


@dataclass(frozen=True)
class Channel:
    """Row-stochastic conditional matrix C(y|x) with a stimulus prior p(x)."""

    C: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        prior = np.asarray(self.prior, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ValueError(f"C must be square, got shape {C.shape}")
        if prior.shape != (C.shape[0],):
            raise ValueError("prior length must match C")
        if np.any(C < -1e-12) or np.any(C > 1 + 1e-12):
            raise ValueError("C entries must lie in [0, 1]")
        rowsums = C.sum(axis=1)
        if np.any(np.abs(rowsums - 1.0) > _ROW_SUM_TOL):
            worst = int(np.argmax(np.abs(rowsums - 1.0)))
            raise ValueError(f"row {worst} sums to {rowsums[worst]!r}, not 1")
        if abs(prior.sum() - 1.0) > _ROW_SUM_TOL or np.any(prior < -1e-12):
            raise ValueError("prior must be a probability vector")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "prior", prior)

    @property
    def K(self) -> int:
        return self.C.shape[0]


@dataclass(frozen=True)
class OffDiagonalMatrix:
    """A channel's C with the diagonal zeroed (error structure only)."""

    C0: np.ndarray

    @property
    def K(self) -> int:
        return self.C0.shape[0]


@dataclass(frozen=True)
class RowNormalization:
    """Result of normalize_rows: the channel plus which classes survived."""

    channel: Channel
    retained: tuple  # original class indices kept (identity when nothing dropped)


@dataclass(frozen=True)
class CollapseDiagnostics:
    flagged: bool
    mean_row_entropy: float
    mean_row_max: float


def uniform_prior(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


def normalize_rows(counts: ConfusionCounts, zero_row_policy: str = "error",
                   prior: str = "empirical") -> RowNormalization:
    """Row-normalize counts into a Channel.

    prior: "empirical" uses row masses p(x=i) = sum_j N_ij / sum N; "uniform"
    uses 1/K (the simulation convention).

    zero_row_policy: "error" raises ZeroRow(i) on an empty stimulus class;
    "drop_class" removes the class from both axes (iterating, since dropping a
    response column can empty another row), renormalizes, and reports the
    retained original indices.
    """
    if zero_row_policy not in ("error", "drop_class"):
        raise ValueError(f"unknown zero_row_policy {zero_row_policy!r}")
    if prior not in ("empirical", "uniform"):
        raise ValueError(f"unknown prior {prior!r}")
    N = counts.counts.astype(np.float64)
    retained = np.arange(counts.K)
    rowsums = N.sum(axis=1)
    if zero_row_policy == "error":
        if np.any(rowsums == 0):
            raise ZeroRow(int(np.where(rowsums == 0)[0][0]))
    else:
        while True:
            rowsums = N.sum(axis=1)
            keep = rowsums > 0
            if keep.all():
                break
            if not keep.any():
                raise ZeroRow(int(retained[0]))
            N = N[np.ix_(keep, keep)]
            retained = retained[keep]
        rowsums = N.sum(axis=1)
    C = N / rowsums[:, None]
    if prior == "empirical":
        p = rowsums / rowsums.sum()
    else:
        p = uniform_prior(N.shape[0])
    return RowNormalization(Channel(C, p), tuple(int(i) for i in retained))


def laplace_smooth(counts: ConfusionCounts, alpha: float = 0.5,
                   prior: str = "empirical") -> Channel:
    """Add-alpha smoothed channel (sensitivity variant; default Jeffreys 0.5)."""
    N = counts.counts.astype(np.float64) + alpha
    rowsums = N.sum(axis=1)
    C = N / rowsums[:, None]
    if prior == "empirical":
        raw = counts.counts.sum(axis=1).astype(np.float64)
        tot = raw.sum()
        p = raw / tot if tot > 0 else uniform_prior(counts.K)
    else:
        p = uniform_prior(counts.K)
    return Channel(C, p)


def zero_diagonal(ch: Channel) -> OffDiagonalMatrix:
    C0 = ch.C.copy()
    np.fill_diagonal(C0, 0.0)
    return OffDiagonalMatrix(C0)


def mutual_information(ch: Channel) -> float:
    """I(X;Y) in nats for the channel under its prior, with 0 log 0 := 0."""
    px = ch.prior
    C = ch.C
    py = px @ C
    pxy = px[:, None] * C
    mask = (pxy > 0) & (py[None, :] > 0)
    mi = float(np.sum(pxy[mask] * (np.log(pxy[mask]) - np.log((px[:, None] * py[None, :])[mask]))))
    return mi


def row_entropies(C: np.ndarray) -> np.ndarray:
    """Shannon entropy of each row in nats (0 log 0 := 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(C > 0, C * np.log(C), 0.0)
    return -terms.sum(axis=1)


def collapse_flag(ch: Channel) -> CollapseDiagnostics:
    """Flag near-deterministic channels.

    Flagged when mean row entropy < 1e-3 nats OR mean row-max > 0.999.
    """
    ent = float(row_entropies(ch.C).mean())
    rowmax = float(ch.C.max(axis=1).mean())
    return CollapseDiagnostics(ent < ENTROPY_COLLAPSE or rowmax > ROWMAX_COLLAPSE,
                               ent, rowmax)


def accuracy(ch: Channel, weighted: bool = False) -> float:
    """Mean diagonal probability; prior-weighted variant on request."""
    d = np.diag(ch.C)
    if weighted:
        return float(ch.prior @ d)
    return float(d.mean())
