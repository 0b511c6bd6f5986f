"""Cost normalization, quantile cost bands, and per-band temperatures.

Raw costs are min-max scaled to [0, 1]. Bands are empirical quantile chunks
of the scaled costs: edge k sits at the sorted cost with rank floor(k*M/K),
so a pool whose size divides K splits into equal chunks, matching a
sort-and-chunk construction. Empty bands (possible with tied costs) are
merged into their lower neighbor and indices compacted. Each band k gets
temperature tau_min + alpha * mean_cost_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import ExpertPool, _freeze
from .errors import ConfigError


@dataclass(frozen=True)
class CostModel:
    """Normalized per-expert costs in pool order."""

    cost: np.ndarray
    raw_min: float
    raw_max: float

    @property
    def M(self) -> int:
        return self.cost.size


@dataclass(frozen=True)
class BandPartition:
    edges: np.ndarray       # K+1 increasing values, edges[0]=0, edges[-1]=1
    band_of: np.ndarray     # (M,) band index per expert
    mean_cost: np.ndarray   # (K,) mean normalized cost per band
    temperature: np.ndarray  # (K,) tau_min + alpha * mean_cost
    tau_min: float
    alpha: float

    @property
    def n_bands(self) -> int:
        return self.mean_cost.size


def normalize_costs(pool: ExpertPool) -> CostModel:
    """Min-max scale raw costs to [0, 1]; constant-cost pools map to all zeros."""
    raw = pool.costs_raw
    lo, hi = float(raw.min()), float(raw.max())
    if hi > lo:
        cost = (raw - lo) / (hi - lo)
    else:
        cost = np.zeros_like(raw)
    return CostModel(cost=_freeze(cost), raw_min=lo, raw_max=hi)


def partition_bands(costs: CostModel, K: int, tau_min: float, alpha: float) -> BandPartition:
    """Assign each expert to a quantile cost band and compute band temperatures."""
    M = costs.M
    if not 1 <= K <= M:
        raise ConfigError(f"band count K={K} must satisfy 1 <= K <= M={M}")
    if tau_min < 0 or alpha < 0:
        raise ConfigError(f"tau_min and alpha must be nonnegative, got {tau_min}, {alpha}")
    c = costs.cost
    srt = np.sort(c)
    edges = np.concatenate(([0.0], srt[[(k * M) // K for k in range(1, K)]], [1.0]))
    raw_band = np.clip(np.searchsorted(edges, c, side="right") - 1, 0, K - 1)

    present = np.unique(raw_band)
    remap = {int(orig): new for new, orig in enumerate(present)}
    band_of = np.array([remap[int(b)] for b in raw_band], dtype=np.int64)

    # Merge empty intervals into their lower neighbor: the compacted edges are
    # the lower edges of the surviving bands (first one pulled down to 0).
    new_edges = np.concatenate(([0.0], edges[present[1:]], [1.0]))

    n_bands = present.size
    mean_cost = np.array([c[band_of == k].mean() for k in range(n_bands)])
    temperature = tau_min + alpha * mean_cost
    return BandPartition(
        edges=_freeze(new_edges),
        band_of=_freeze(band_of),
        mean_cost=_freeze(mean_cost),
        temperature=_freeze(temperature),
        tau_min=tau_min,
        alpha=alpha,
    )
