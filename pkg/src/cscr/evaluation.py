"""Deferral curves, their summary metrics, and paired significance tests.

A deferral curve traces (mean normalized cost, mean quality) while the routing
penalty lambda sweeps a grid. Metrics:

* AUDC — trapezoidal area under the curve over a cost axis shared by all
  policies: [0, C_max], where C_max is the cost of always calling the most
  expensive expert. Duplicate costs keep their best quality; the curve is
  extended flat to the axis ends; the area is divided by C_max.
* QNC — the minimum curve cost that matches the best single expert's mean
  quality, relative to that expert's own cost. If the curve never matches,
  the sentinel C_max / c_star is returned with an "unmatched" flag.
* peak — the best mean quality anywhere on the curve.

Significance: a paired bootstrap over queries for the AUDC difference, and an
exact one-sided binomial McNemar test on per-query correctness at a matched
cost budget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class DeferralCurve:
    lambda_grid: np.ndarray
    points: np.ndarray  # (L, 2): mean_cost, mean_quality per lambda

    def __post_init__(self) -> None:
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise DataError(f"curve points must be (L, 2), got {self.points.shape}")
        if self.lambda_grid.size != self.points.shape[0]:
            raise DataError("lambda grid and points disagree in length")

    def canonical_points(self, c_max: float = 1.0) -> np.ndarray:
        """Clip to [0, c_max], keep the best quality per distinct cost, sort by cost."""
        cost = np.clip(self.points[:, 0], 0.0, c_max)
        quality = self.points[:, 1]
        uniq = np.unique(cost)
        best = np.array([quality[cost == c].max() for c in uniq])
        return np.column_stack([uniq, best])


@dataclass(frozen=True)
class SweepResult:
    """Per-query routing outcomes for every lambda in the grid."""

    lambda_grid: np.ndarray
    chosen: np.ndarray    # (L, n) expert index per query
    cost: np.ndarray      # (L, n) normalized cost of the chosen expert
    quality: np.ndarray   # (L, n) observed quality of the chosen expert
    similarity: np.ndarray | None = None  # (L, n) for similarity-based policies

    @property
    def n_queries(self) -> int:
        return self.chosen.shape[1]

    @property
    def curve(self) -> DeferralCurve:
        pts = np.column_stack([self.cost.mean(axis=1), self.quality.mean(axis=1)])
        return DeferralCurve(lambda_grid=self.lambda_grid, points=pts)


def sweep(policy, cost: np.ndarray, quality: np.ndarray, lambda_grid: np.ndarray) -> SweepResult:
    """Route every query at every lambda; policies are bound to the query set already."""
    quality = np.atleast_2d(quality)
    lambda_grid = np.asarray(lambda_grid, dtype=np.float64)
    if lambda_grid.size == 0:
        raise ConfigError("empty lambda grid")
    if quality.shape[0] == 0:
        raise DataError("empty test set")
    n = quality.shape[0]
    L = lambda_grid.size
    chosen = np.empty((L, n), dtype=np.int64)
    sims = np.full((L, n), np.nan)
    have_sims = False
    for li, lam in enumerate(lambda_grid):
        idx, s = policy.select(float(lam), li)
        chosen[li] = idx
        if s is not None:
            sims[li] = s
            have_sims = True
    cost_mat = np.asarray(cost, dtype=np.float64)[chosen]
    qual_mat = quality[np.arange(n)[None, :], chosen]
    return SweepResult(
        lambda_grid=lambda_grid,
        chosen=chosen,
        cost=cost_mat,
        quality=qual_mat,
        similarity=sims if have_sims else None,
    )


# ---------------------------------------------------------------------------
# curve metrics
# ---------------------------------------------------------------------------

def audc(curve: DeferralCurve, c_max: float = 1.0) -> float:
    """Area under the deferral curve over the shared cost axis [0, c_max]."""
    if c_max <= 0:
        raise ConfigError(f"c_max must be > 0, got {c_max}")
    pts = curve.canonical_points(c_max)
    if pts.shape[0] == 1:
        return float(pts[0, 1])
    x = pts[:, 0]
    y = pts[:, 1]
    if x[0] > 0.0:
        x = np.concatenate(([0.0], x))
        y = np.concatenate(([y[0]], y))
    if x[-1] < c_max:
        x = np.concatenate((x, [c_max]))
        y = np.concatenate((y, [y[-1]]))
    area = 0.0
    for i in range(x.size - 1):
        area += 0.5 * (y[i] + y[i + 1]) * (x[i + 1] - x[i])
    return float(area / c_max)


def qnc(
    curve: DeferralCurve, best_quality: float, best_cost: float, c_max: float = 1.0
) -> tuple[float, str | None]:
    """Minimum relative cost at which the curve matches the best single expert.

    Returns (value, flag); flag is None when matched, "unmatched" when no
    curve point reaches the reference quality, "degenerate" when the reference
    expert is free (cost 0).
    """
    pts = curve.canonical_points(c_max)
    if best_cost <= 0.0:
        return float("inf"), "degenerate"
    matched = pts[pts[:, 1] >= best_quality]
    if matched.shape[0] == 0:
        return float(c_max / best_cost), "unmatched"
    return float(matched[:, 0].min() / best_cost), None


def peak(curve: DeferralCurve) -> float:
    """Best mean quality anywhere on the curve."""
    return float(curve.points[:, 1].max())


def cost_at_peak(curve: DeferralCurve) -> float:
    """Lowest mean cost among the operating points that attain the peak."""
    best = curve.points[:, 1].max()
    return float(curve.points[curve.points[:, 1] == best, 0].min())


def single_expert_stats(quality: np.ndarray, cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(mean test quality, normalized cost) for each expert used as a fixed policy."""
    quality = np.atleast_2d(quality)
    return quality.mean(axis=0), np.asarray(cost, dtype=np.float64)


def best_single_expert(mean_quality: np.ndarray, cost: np.ndarray) -> int:
    """Most accurate expert; ties go to the cheaper one, then the lower index."""
    order = sorted(range(mean_quality.size), key=lambda m: (-mean_quality[m], cost[m], m))
    return order[0]


# ---------------------------------------------------------------------------
# paired significance tests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BootstrapResult:
    delta_audc: float
    ci_low: float
    ci_high: float
    p_one_sided: float
    n_resamples: int
    resample_size: int


def paired_bootstrap_audc(
    sweep_a: SweepResult,
    sweep_b: SweepResult,
    n_resamples: int,
    seed: int,
    c_max: float = 1.0,
    resample_size: int | None = None,
    indices: np.ndarray | None = None,
) -> BootstrapResult:
    """Percentile bootstrap over queries for AUDC(a) - AUDC(b).

    Both sweeps must cover the same queries and lambda grid. Resamples draw
    queries with replacement; each resample recomputes both curves and their
    AUDCs. The one-sided p-value for delta > 0 counts resampled deltas at or
    below zero, splitting ties in half. ``indices`` may inject a fixed
    (n_resamples, resample_size) matrix for cross-checks.
    """
    if n_resamples < 100:
        raise ConfigError(f"n_resamples={n_resamples} is below the minimum of 100")
    if sweep_a.n_queries != sweep_b.n_queries:
        raise DataError("paired bootstrap needs identical query sets")
    if sweep_a.lambda_grid.size != sweep_b.lambda_grid.size:
        raise DataError("paired bootstrap needs identical lambda grids")
    n = sweep_a.n_queries
    m = resample_size if resample_size is not None else n
    if indices is None:
        rng = np.random.default_rng(seed)
        indices = rng.integers(0, n, size=(n_resamples, m))
    else:
        indices = np.asarray(indices)
        if indices.shape[0] != n_resamples:
            raise ConfigError("injected indices do not match n_resamples")
        m = indices.shape[1]

    delta_full = audc(sweep_a.curve, c_max) - audc(sweep_b.curve, c_max)

    # Column-count trick: the resampled mean is (matrix @ counts) / m.
    counts = np.zeros((n, n_resamples))
    for r in range(n_resamples):
        counts[:, r] = np.bincount(indices[r], minlength=n)
    mean_cost_a = (sweep_a.cost @ counts) / m
    mean_qual_a = (sweep_a.quality @ counts) / m
    mean_cost_b = (sweep_b.cost @ counts) / m
    mean_qual_b = (sweep_b.quality @ counts) / m

    deltas = np.empty(n_resamples)
    for r in range(n_resamples):
        ca = DeferralCurve(sweep_a.lambda_grid, np.column_stack([mean_cost_a[:, r], mean_qual_a[:, r]]))
        cb = DeferralCurve(sweep_b.lambda_grid, np.column_stack([mean_cost_b[:, r], mean_qual_b[:, r]]))
        deltas[r] = audc(ca, c_max) - audc(cb, c_max)

    ci_low, ci_high = np.percentile(deltas, [2.5, 97.5], method="linear")
    p = float(((deltas < 0).sum() + 0.5 * (deltas == 0).sum()) / n_resamples)
    return BootstrapResult(
        delta_audc=float(delta_full),
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_one_sided=p,
        n_resamples=n_resamples,
        resample_size=m,
    )


@dataclass(frozen=True)
class McNemarResult:
    n10: int
    n01: int
    p_exact: float
    budget: float
    operating_cost_a: float
    operating_cost_b: float
    degenerate: bool


def binomial_tail_p(n10: int, n01: int) -> float:
    """One-sided exact P(X >= n10) for X ~ Binomial(n10 + n01, 1/2)."""
    n = n10 + n01
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, k) for k in range(n10, n + 1))
    return tail / float(2**n)


def mcnemar_matched_budget(
    sweep_a: SweepResult,
    sweep_b: SweepResult,
    theta_pos: float = 0.5,
    budget: float | None = None,
) -> McNemarResult:
    """Exact McNemar test at the operating points nearest a shared cost budget.

    The default budget is the median of both policies' curve costs combined.
    Each policy contributes the per-query binary correctness (quality >=
    theta_pos) of its curve point closest to the budget, ties toward cheaper.
    """
    if sweep_a.n_queries != sweep_b.n_queries:
        raise DataError("matched-budget test needs identical query sets")
    costs_a = sweep_a.cost.mean(axis=1)
    costs_b = sweep_b.cost.mean(axis=1)
    if budget is None:
        budget = float(np.median(np.concatenate([costs_a, costs_b])))
    ia = _nearest_operating_point(costs_a, budget)
    ib = _nearest_operating_point(costs_b, budget)
    correct_a = sweep_a.quality[ia] >= theta_pos
    correct_b = sweep_b.quality[ib] >= theta_pos
    n10 = int(np.sum(correct_a & ~correct_b))
    n01 = int(np.sum(~correct_a & correct_b))
    degenerate = (n10 + n01) == 0
    p = 1.0 if degenerate else binomial_tail_p(n10, n01)
    return McNemarResult(
        n10=n10,
        n01=n01,
        p_exact=p,
        budget=budget,
        operating_cost_a=float(costs_a[ia]),
        operating_cost_b=float(costs_b[ib]),
        degenerate=degenerate,
    )


def _nearest_operating_point(costs: np.ndarray, budget: float) -> int:
    order = sorted(range(costs.size), key=lambda i: (abs(costs[i] - budget), costs[i], i))
    return order[0]


def lambda_grid(lambda_max: float, n_points: int) -> np.ndarray:
    """Evenly spaced sweep grid from 0 to lambda_max inclusive."""
    if n_points < 1:
        raise ConfigError(f"need at least one grid point, got {n_points}")
    if lambda_max < 0:
        raise ConfigError(f"lambda_max must be >= 0, got {lambda_max}")
    if n_points == 1:
        return np.array([0.0])
    return np.linspace(0.0, lambda_max, n_points)
