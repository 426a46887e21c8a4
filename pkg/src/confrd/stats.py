"""Statistical battery: rank tests, Welch t, Spearman, BH-FDR, proportion
tests, block-demeaned regressions, slice residualization, and a cell-demeaned
approximation of the replicate-level mixed model.

Conventions: all tests are two-sided; p-values are returned raw, with a
reporting floor of 2.2e-16 applied via floor_p where tables mirror the
"p < 2.2e-16" convention.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats as spstats

from .errors import (DegenerateProportions, DegenerateSample, RankDeficient,
                     SliceTooSmall, ZeroVariance)

P_FLOOR = 2.2e-16
WILCOXON_EXACT_MAX_POOLED = 12


def floor_p(p):
    """Reporting floor, elementwise; raw values stay available upstream."""
    return np.maximum(np.asarray(p, dtype=np.float64), P_FLOOR)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    method: str
    effect_ci: Optional[tuple] = None  # 95% interval when the test has one
    df: Optional[float] = None

    def __post_init__(self):
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p_value {self.p_value!r} outside [0, 1]")
        if self.effect_ci is not None and self.effect_ci[0] > self.effect_ci[1]:
            raise ValueError("effect_ci low > high")

    @property
    def p_value_floored(self) -> float:
        return float(floor_p(self.p_value))


@dataclass(frozen=True)
class RegressionFit:
    names: tuple
    estimates: np.ndarray
    standard_errors: np.ndarray
    t_statistics: np.ndarray
    p_values: np.ndarray
    n: int
    scheme: str

    def __post_init__(self):
        k = len(self.names)
        for arr in (self.estimates, self.standard_errors, self.t_statistics, self.p_values):
            if len(arr) != k:
                raise ValueError("coefficient array lengths disagree")
        if self.n <= k:
            raise ValueError("need more observations than coefficients")

    def coef(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def p(self, name: str) -> float:
        return float(self.p_values[self.names.index(name)])


# ------------------------------------------------------------------ rank tests

def _rank_sum_exact_p(ranks: np.ndarray, nx: int, w_obs: float) -> float:
    """Two-sided exact p by enumerating every assignment of pooled ranks."""
    idx = range(len(ranks))
    total = 0
    le = 0
    ge = 0
    for comb in itertools.combinations(idx, nx):
        w = ranks[list(comb)].sum()
        total += 1
        if w <= w_obs + 1e-9:
            le += 1
        if w >= w_obs - 1e-9:
            ge += 1
    return min(1.0, 2.0 * min(le, ge) / total)


def wilcoxon_rank_sum(x, y, method: str = "auto") -> TestResult:
    """Two-sided rank-sum test; exact enumeration when pooled n <= 12,
    otherwise normal approximation with tie and continuity corrections.
    method forces one branch ("exact"/"normal") for cross-validation."""
    if method not in ("auto", "exact", "normal"):
        raise ValueError(f"unknown method {method!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([x, y])
    if np.all(pooled == pooled[0]):
        raise DegenerateSample("all pooled values identical")
    nx, ny = len(x), len(y)
    N = nx + ny
    ranks = spstats.rankdata(pooled)  # mid-ranks for ties
    w = float(ranks[:nx].sum())
    exact = N <= WILCOXON_EXACT_MAX_POOLED if method == "auto" else method == "exact"
    if exact:
        p = _rank_sum_exact_p(ranks, nx, w)
        return TestResult(statistic=w, p_value=p, method="wilcoxon_rank_sum_exact")
    mu = nx * (N + 1) / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (N * (N - 1))
    var = nx * ny / 12.0 * ((N + 1) - tie_term)
    if var <= 0:
        raise DegenerateSample("rank variance is zero")
    diff = w - mu
    cc = 0.5 * np.sign(diff)  # continuity correction toward the mean
    z = (diff - cc) / np.sqrt(var) if diff != 0 else 0.0
    p = float(2.0 * spstats.norm.sf(abs(z)))
    return TestResult(statistic=float(z), p_value=min(1.0, p),
                      method="wilcoxon_rank_sum_normal")


def welch_t(x, y) -> TestResult:
    """Welch's t with Satterthwaite df and a 95% CI for mean(x) - mean(y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or len(y) < 2:
        raise ZeroVariance("each sample needs at least 2 points")
    vx = float(np.var(x, ddof=1))
    vy = float(np.var(y, ddof=1))
    if vx == 0 and vy == 0:
        raise ZeroVariance("both samples have zero variance")
    nx, ny = len(x), len(y)
    se2 = vx / nx + vy / ny
    d = float(np.mean(x) - np.mean(y))
    t = d / np.sqrt(se2) if se2 > 0 else 0.0
    df = se2**2 / ((vx / nx) ** 2 / (nx - 1) + (vy / ny) ** 2 / (ny - 1))
    p = float(2.0 * spstats.t.sf(abs(t), df)) if se2 > 0 else 1.0
    tcrit = float(spstats.t.ppf(0.975, df))
    half = tcrit * np.sqrt(se2)
    return TestResult(statistic=float(t), p_value=min(1.0, p), method="welch_t",
                      effect_ci=(d - half, d + half), df=float(df))


def spearman(x, y) -> float:
    """Pearson correlation of mid-ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need matched samples with n >= 3")
    rx = spstats.rankdata(x)
    ry = spstats.rankdata(y)
    if np.std(rx) == 0 or np.std(ry) == 0:
        raise ZeroVariance("constant ranks")
    return float(np.corrcoef(rx, ry)[0, 1])


def bh_fdr(pvals) -> np.ndarray:
    """Benjamini-Hochberg step-up adjustment, original order restored."""
    p = np.asarray(pvals, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("pvals must be a nonempty 1-d sequence")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p)
    order = np.argsort(p, kind="stable")
    ranked = p[order] * m / np.arange(1, m + 1)
    adj_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    adj_sorted = np.minimum(adj_sorted, 1.0)
    out = np.empty(m)
    out[order] = adj_sorted
    return out


def two_sample_proportion_test(k1: int, n1: int, k2: int, n2: int) -> TestResult:
    """Pooled two-sided z-test for p1 - p2 with a Wald CI."""
    for k, n in ((k1, n1), (k2, n2)):
        if n < 1 or not (0 <= k <= n):
            raise ValueError("need 0 <= k <= n and n >= 1")
    p1, p2 = k1 / n1, k2 / n2
    pooled = (k1 + k2) / (n1 + n2)
    if pooled <= 0.0 or pooled >= 1.0:
        raise DegenerateProportions(f"pooled proportion {pooled!r}")
    se = np.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    z = (p1 - p2) / se
    p = float(2.0 * spstats.norm.sf(abs(z)))
    zcrit = float(spstats.norm.ppf(0.975))
    se_unpooled = np.sqrt(p1 * (1 - p1) / n1 + p2 * (1 - p2) / n2)
    d = p1 - p2
    return TestResult(statistic=float(z), p_value=min(1.0, p),
                      method="two_sample_proportion_z",
                      effect_ci=(d - zcrit * se_unpooled, d + zcrit * se_unpooled))


# ------------------------------------------------------------------ regressions

def _ols(X: np.ndarray, y: np.ndarray, names, scheme: str) -> RegressionFit:
    n, k = X.shape
    if n <= k:
        raise RankDeficient(f"{n} observations for {k} coefficients")
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficient("design matrix is rank deficient")
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    df = n - k
    sigma2 = float(resid @ resid) / df
    cov = np.linalg.inv(X.T @ X) * sigma2
    se = np.sqrt(np.maximum(np.diag(cov), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.inf * np.sign(coef))
    t = np.where(np.isnan(t), 0.0, t)
    p = 2.0 * spstats.t.sf(np.abs(t), df)
    return RegressionFit(tuple(names), coef, se, t, p, n, scheme)


def _demean_within(values: np.ndarray, labels) -> np.ndarray:
    out = values.astype(np.float64).copy()
    labels = np.asarray(labels)
    for lab in np.unique(labels):
        m = labels == lab
        out[m] -= out[m].mean()
    return out


def block_demeaned_regression(y, x, blocks, groups, reference_group,
                              accuracy=None) -> RegressionFit:
    """Within-block demeaning of y, x (and accuracy), then least squares with
    group main effects and x-by-group interactions.

    The interaction coefficients are the slope differences against the
    reference group; block-constant confounds in any demeaned variable are
    annihilated by construction.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    blocks = np.asarray(blocks)
    groups = np.asarray(groups)
    if not (len(y) == len(x) == len(blocks) == len(groups)):
        raise ValueError("y, x, blocks, groups must have matching length")
    levels = [g for g in np.unique(groups)]
    if reference_group not in levels:
        raise ValueError(f"reference group {reference_group!r} not present")
    yd = _demean_within(y, blocks)
    xd = _demean_within(x, blocks)
    cols = [np.ones_like(yd), xd]
    names = ["intercept", "x"]
    others = [g for g in levels if g != reference_group]
    for g in others:
        cols.append((groups == g).astype(np.float64))
        names.append(f"group[{g}]")
    for g in others:
        cols.append(xd * (groups == g))
        names.append(f"x:group[{g}]")
    scheme = "block-demeaned"
    if accuracy is not None:
        acc = np.asarray(accuracy, dtype=np.float64)
        if len(acc) != len(y):
            raise ValueError("accuracy length mismatch")
        cols.append(_demean_within(acc, blocks))
        names.append("accuracy")
        scheme = "block-demeaned+accuracy"
    return _ols(np.column_stack(cols), yd, names, scheme)


def residualize_within_slice(y, accuracy, slice_labels) -> np.ndarray:
    """Residuals of y after per-slice OLS on accuracy with intercept."""
    y = np.asarray(y, dtype=np.float64)
    acc = np.asarray(accuracy, dtype=np.float64)
    labels = np.asarray(slice_labels)
    if not (len(y) == len(acc) == len(labels)):
        raise ValueError("length mismatch")
    out = np.empty_like(y)
    for lab in np.unique(labels):
        m = labels == lab
        if m.sum() < 3:
            raise SliceTooSmall(f"slice {lab!r} has {int(m.sum())} < 3 points")
        X = np.column_stack([np.ones(m.sum()), acc[m]])
        coef, _, _, _ = np.linalg.lstsq(X, y[m], rcond=None)
        out[m] = y[m] - X @ coef
    return out


@dataclass(frozen=True)
class SliceRegressions:
    """One RegressionFit per slice, same design everywhere."""

    slices: tuple
    fits: tuple

    def term_estimates(self, name: str) -> np.ndarray:
        return np.array([f.coef(name) for f in self.fits])

    def term_pvalues(self, name: str) -> np.ndarray:
        return np.array([f.p(name) for f in self.fits])

    def term_fdr(self, name: str) -> np.ndarray:
        """BH adjustment of one term's p-values across slices."""
        return bh_fdr(self.term_pvalues(name))

    def summarize(self, name: str, alpha: float = 0.05) -> dict:
        """Median/min/max coefficient and significant-slice count (on FDR)."""
        est = self.term_estimates(name)
        adj = self.term_fdr(name)
        return {
            "term": name,
            "median": float(np.median(est)),
            "min": float(np.min(est)),
            "max": float(np.max(est)),
            "n_slices": len(est),
            "n_significant": int(np.sum(adj < alpha)),
        }


def _per_slice(builder, slice_labels):
    labels = np.asarray(slice_labels)
    slices = []
    fits = []
    for lab in np.unique(labels):
        m = labels == lab
        slices.append(lab)
        fits.append(builder(m))
    return SliceRegressions(tuple(slices), tuple(fits))


def component_regression(residual_y, breadth, strength, structure_offset,
                         slice_labels) -> SliceRegressions:
    """Per-slice model: residual ~ breadth + strength + breadth:strength +
    structure contrast."""
    ry = np.asarray(residual_y, dtype=np.float64)
    b = np.asarray(breadth, dtype=np.float64)
    s = np.asarray(strength, dtype=np.float64)
    g = np.asarray(structure_offset, dtype=np.float64)

    def build(m):
        X = np.column_stack([np.ones(m.sum()), b[m], s[m], b[m] * s[m], g[m]])
        return _ols(X, ry[m], ["intercept", "breadth", "strength",
                               "breadth:strength", "structure"], "per-slice")

    return _per_slice(build, slice_labels)


def magnitude_regression(residual_y, magnitude, structure_offset,
                         slice_labels) -> SliceRegressions:
    """Per-slice model: residual ~ global asymmetry magnitude + structure."""
    ry = np.asarray(residual_y, dtype=np.float64)
    mag = np.asarray(magnitude, dtype=np.float64)
    g = np.asarray(structure_offset, dtype=np.float64)

    def build(m):
        X = np.column_stack([np.ones(m.sum()), mag[m], g[m]])
        return _ols(X, ry[m], ["intercept", "magnitude", "structure"], "per-slice")

    return _per_slice(build, slice_labels)


def slice_interaction_regression(y, x, group_indicator, slice_labels) -> SliceRegressions:
    """Per-slice model: y ~ x + group + x:group.

    The x coefficient is the base-group slope; x + x:group is the other
    group's slope; x:group is the slope difference.
    """
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(group_indicator, dtype=np.float64)

    def build(m):
        X = np.column_stack([np.ones(m.sum()), x[m], g[m], x[m] * g[m]])
        return _ols(X, y[m], ["intercept", "x", "group", "x:group"], "per-slice")

    return _per_slice(build, slice_labels)


# ------------------------------------------------------------------ anova

@dataclass(frozen=True)
class AnovaTable:
    terms: tuple
    F: np.ndarray
    p_values: np.ndarray
    df_num: np.ndarray
    df_den: int
    label: str = "fixed-effects approximation (cell-demeaned error)"


def cell_demeaned_anova(y, structure, a, lambda_gen, log10_n, cells) -> AnovaTable:
    """Sequential F-tests for structure x a x lambda_gen x log10 N.

    The random intercept of the replicate-level mixed model is approximated by
    taking the error term from within-cell demeaning: every fixed term is
    tested against the within-cell mean square. Requires >= 2 replicates per
    cell.
    """
    y = np.asarray(y, dtype=np.float64)
    struct = np.asarray(structure)
    levels = list(np.unique(struct))
    if len(levels) != 2:
        raise ValueError(f"structure must have exactly 2 levels, got {levels}")
    S = (struct == levels[1]).astype(np.float64)
    A = np.asarray(a, dtype=np.float64)
    L = np.asarray(lambda_gen, dtype=np.float64)
    N = np.asarray(log10_n, dtype=np.float64)
    cells = np.asarray(cells)
    n = len(y)
    if not (len(S) == len(A) == len(L) == len(N) == len(cells) == n):
        raise ValueError("length mismatch")

    uniq, counts = np.unique(cells, return_counts=True)
    if np.any(counts < 2):
        raise RankDeficient("every cell needs at least 2 replicates")
    sse_within = 0.0
    for lab in uniq:
        m = cells == lab
        sse_within += float(np.sum((y[m] - y[m].mean()) ** 2))
    df_den = n - len(uniq)
    mse_within = sse_within / df_den

    base = {"structure": S, "a": A, "lambda_gen": L, "log10_n": N}
    term_names = list(base.keys())
    for r in (2, 3, 4):
        for combo in itertools.combinations(base.keys(), r):
            term_names.append(":".join(combo))

    def term_column(name):
        col = np.ones(n)
        for part in name.split(":"):
            col = col * base[part]
        return col

    X = np.ones((n, 1))
    coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
    sse_prev = float(np.sum((y - X @ coef) ** 2))
    Fs, ps = [], []
    for name in term_names:
        X = np.column_stack([X, term_column(name)])
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise RankDeficient(f"design became rank deficient at term {name!r}")
        coef, _, _, _ = np.linalg.lstsq(X, y, rcond=None)
        sse = float(np.sum((y - X @ coef) ** 2))
        delta = max(sse_prev - sse, 0.0)
        sse_prev = sse
        if mse_within > 0:
            F = delta / mse_within
            p = float(spstats.f.sf(F, 1, df_den))
        else:
            F = np.inf if delta > 0 else 0.0
            p = 0.0 if delta > 0 else 1.0
        Fs.append(F)
        ps.append(p)
    return AnovaTable(tuple(term_names), np.array(Fs), np.array(ps),
                      np.ones(len(term_names)), df_den)
