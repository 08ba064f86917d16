"""Metrics, paired significance tests and spatial error summaries."""

from dataclasses import dataclass
from fractions import Fraction
import itertools
import math

import numpy as np

from .chaos_sim import DEFAULT_PARAMS, lorenz_deriv
from .errors import AllZeroDifferences, EmptyInput, TooFewSamples, ZeroVariance

EXACT_MAX_N = 25
MIN_WILCOXON_N = 5
MODEL_ORDER = ("Koopman (F)", "Koopman (U)", "PCA (PI)", "PCA")


def _pair(y, yhat):
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if len(y) == 0 or len(y) != len(yhat):
        raise EmptyInput(f"need equal non-zero lengths, got {len(y)} and {len(yhat)}")
    return y, yhat


def mse(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.mean((y - yhat) ** 2))


def mae(y, yhat):
    y, yhat = _pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def r2(y, yhat):
    y, yhat = _pair(y, yhat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raise ZeroVariance("ground truth has zero variance")
    return 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot


@dataclass(frozen=True)
class TrajectoryMetrics:
    traj_id: int
    mse: float
    mae: float
    r2: float
    n_points: int


def trajectory_metrics(traj_id, y, yhat):
    """Metrics for one trajectory; r2 is NaN when the targets are constant."""
    y, yhat = _pair(y, yhat)
    try:
        score = r2(y, yhat)
    except ZeroVariance:
        score = float("nan")
    return TrajectoryMetrics(int(traj_id), mse(y, yhat), mae(y, yhat), score, len(y))


def summarize(metrics):
    """Mean and (population) std across trajectories for each metric, NaNs skipped."""
    out = {}
    for name in ("mse", "mae", "r2"):
        v = np.array([getattr(m, name) for m in metrics], dtype=np.float64)
        v = v[np.isfinite(v)]
        out[name] = (float(v.mean()), float(v.std())) if len(v) else (float("nan"), float("nan"))
    out["n"] = len(metrics)
    return out


# ------------------------------------------------------------------ Wilcoxon


def _ranks(values):
    """Average ranks (1-based) with ties sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _signed_ranks(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.shape != np.shape(b) or d.ndim != 1:
        raise ValueError("wilcoxon needs two equal-length 1-d samples")
    d = d[d != 0]
    if len(d) == 0:
        raise AllZeroDifferences("all paired differences are zero")
    if len(d) < MIN_WILCOXON_N:
        raise TooFewSamples(f"{len(d)} non-zero differences, need at least {MIN_WILCOXON_N}")
    return d, _ranks(np.abs(d))


def _exact_cdf(ranks, w):
    """P(W+ <= w) under the null, by dynamic programming over doubled ranks."""
    twice = np.rint(2 * ranks).astype(np.int64)
    total = int(twice.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in twice:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    limit = int(math.floor(2 * w + 1e-9))
    return Fraction(int(sum(counts[: limit + 1])), 2 ** len(ranks))


def wilcoxon_signed_rank(a, b, exact_max_n=EXACT_MAX_N):
    """Two-sided p-value of the signed-rank test; returns (statistic, p)."""
    d, ranks = _signed_ranks(a, b)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    n = len(d)
    if n <= exact_max_n:
        p = min(1.0, float(2 * _exact_cdf(ranks, w)))
        return w, p
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    z = (w - mean + 0.5) / math.sqrt(var)
    p = min(1.0, math.erfc(-z / math.sqrt(2.0)))  # 2 * Phi(z) with z <= 0
    return w, p


def wilcoxon_enumerate(a, b):
    """Reference two-sided p by listing all 2^n sign assignments (small n only)."""
    d, ranks = _signed_ranks(a, b)
    w = min(float(ranks[d > 0].sum()), float(ranks[d < 0].sum()))
    total = float(ranks.sum())
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(ranks)):
        wp = float(np.dot(signs, ranks))
        if min(wp, total - wp) <= w + 1e-9:
            hits += 1
    return hits / 2 ** len(ranks)


def bonferroni_alpha(alpha, m):
    if m < 1:
        raise ValueError("m must be at least 1")
    return alpha / m


def pairwise_table(per_model, alpha=0.05, models=None):
    """All model pairs x {mse, mae, r2}: Wilcoxon p, significance and winner.

    ``per_model`` maps a model name to its list of TrajectoryMetrics over the
    same trajectories.  The corrected level uses m = number of pairs.
    """
    models = list(models or per_model)
    ids = [tuple(m.traj_id for m in per_model[k]) for k in models]
    if len(set(ids)) != 1:
        raise ValueError("models were evaluated on different trajectory sets")
    pairs = list(itertools.combinations(models, 2))
    level = bonferroni_alpha(alpha, len(pairs))
    rows = []
    for a, b in pairs:
        for metric in ("mse", "mae", "r2"):
            va = np.array([getattr(m, metric) for m in per_model[a]])
            vb = np.array([getattr(m, metric) for m in per_model[b]])
            keep = np.isfinite(va) & np.isfinite(vb)
            va, vb = va[keep], vb[keep]
            try:
                _, p = wilcoxon_signed_rank(va, vb)
            except AllZeroDifferences:
                p = 1.0
            significant = p < level
            winner = ""
            if significant:
                better_a = va.mean() > vb.mean() if metric == "r2" else va.mean() < vb.mean()
                winner = a if better_a else b
            rows.append({"model_a": a, "model_b": b, "metric": metric, "p_value": p,
                         "alpha": level, "significant": significant, "winner": winner})
    return rows


# ------------------------------------------------------------- error density


@dataclass
class ErrorDensityMap:
    x_edges: np.ndarray
    z_edges: np.ndarray
    grid: list  # nested Fractions, [x_bin][z_bin]
    x_marginal: list
    z_marginal: list
    total: Fraction
    quadrants: list

    def as_float(self):
        return np.array([[float(v) for v in row] for row in self.grid])


def _bin_index(values, edges):
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def error_density(states, y_true, y_pred, bins=100, params=DEFAULT_PARAMS):
    """Accumulated |y_true - y_pred| on an X-Z histogram plus quadrant summaries.

    Sums are kept as exact fractions of the float inputs so the marginals and
    the total agree with the per-point sum exactly.
    """
    states = np.asarray(states, dtype=np.float64).reshape(-1, 3)
    y_true, y_pred = _pair(y_true, y_pred)
    if len(states) != len(y_true):
        raise EmptyInput("states and predictions differ in length")
    err = np.abs(y_true - y_pred)
    x, z = states[:, 0], states[:, 2]
    x_edges = np.linspace(x.min(), x.max() if x.max() > x.min() else x.min() + 1.0, bins + 1)
    z_edges = np.linspace(z.min(), z.max() if z.max() > z.min() else z.min() + 1.0, bins + 1)
    ix, iz = _bin_index(x, x_edges), _bin_index(z, z_edges)
    grid = [[Fraction(0)] * bins for _ in range(bins)]
    for i, k, e in zip(ix, iz, err):
        grid[i][k] += Fraction(float(e))
    x_marg = [sum(row, Fraction(0)) for row in grid]
    z_marg = [sum((grid[i][k] for i in range(bins)), Fraction(0)) for k in range(bins)]
    total = sum((Fraction(float(e)) for e in err), Fraction(0))
    return ErrorDensityMap(x_edges, z_edges, grid, x_marg, z_marg, total, quadrant_vectors(states, params))


def quadrant_vectors(states, params=DEFAULT_PARAMS):
    """Split X-Z points at the median; per quadrant the centroid and mean (vx, vz).

    Quadrants are numbered clockwise from top-left: 1 (x < mx, z >= mz),
    2 (x >= mx, z >= mz), 3 (x >= mx, z < mz), 4 (x < mx, z < mz).
    Empty quadrants are reported with ``present`` False.
    """
    states = np.asarray(states, dtype=np.float64).reshape(-1, 3)
    if len(states) == 0:
        raise EmptyInput("no states")
    mx, mz = np.median(states[:, 0]), np.median(states[:, 2])
    vel = lorenz_deriv(states, params)
    right, top = states[:, 0] >= mx, states[:, 2] >= mz
    masks = [~right & top, right & top, right & ~top, ~right & ~top]
    out = []
    for q, m in enumerate(masks, start=1):
        if m.any():
            out.append({"quadrant": q, "present": True, "count": int(m.sum()),
                        "centroid": (float(states[m, 0].mean()), float(states[m, 2].mean())),
                        "mean_velocity": (float(vel[m, 0].mean()), float(vel[m, 2].mean()))})
        else:
            out.append({"quadrant": q, "present": False, "count": 0, "centroid": None, "mean_velocity": None})
    return out
