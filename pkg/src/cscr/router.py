"""Routing policies behind one interface.

* ``cscr``          — retrieve the top-k most similar experts, then pick
  argmax(similarity - lambda * cost). The printed rule in some write-ups is an
  argmin over [cos + lambda * c]; minimizing similarity contradicts how the
  space is trained, so the argmax form is the default and the literal argmin
  variant sits behind ``literal_argmin`` for auditing.
* ``oracle``        — hindsight: cheapest expert clearing the correctness
  threshold; if none does, cheapest among the maximal-quality experts.
* ``random``        — uniform over the pool.
* ``pareto_random`` — uniform over the (cost, mean train quality) Pareto
  frontier, restricted to a budget interpolated from lambda.
* ``thompson``      — per-expert Beta posteriors over success; pick
  argmax(sample - lambda * cost) and update the chosen arm only.

All policies see normalized costs. Decisions are deterministic given seeds;
Thompson is sequential by nature and processes queries in dataset order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import MlpHead, forward_batch
from .errors import ConfigError, DataError
from .flat_index import FlatIndex, top_k_batch

POLICIES = ("cscr", "oracle", "random", "pareto_random", "thompson")


@dataclass(frozen=True)
class RoutingDecision:
    query_id: str
    expert_id: str
    similarity: float | None
    cost: float
    score: float
    policy: str


@dataclass
class PolicyConfig:
    policy: str = "cscr"
    lam: float = 0.0
    k: int = 4
    seed: int = 0
    positive_threshold: float = 0.5
    literal_argmin: bool = False
    lambda_max: float = 2.0  # budget anchor for pareto_random

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy '{self.policy}' (choose from {POLICIES})")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


# ---------------------------------------------------------------------------
# single-decision primitives
# ---------------------------------------------------------------------------

def select_cscr(
    cand_idx: np.ndarray,
    cand_sims: np.ndarray,
    cost: np.ndarray,
    lam: float,
    literal_argmin: bool = False,
) -> int:
    """Pick among retrieved candidates; ties go to lower cost, then lower pool index."""
    k = cand_idx.size
    if literal_argmin:
        keys = [(cand_sims[t] + lam * cost[cand_idx[t]], cost[cand_idx[t]], cand_idx[t]) for t in range(k)]
    else:
        keys = [(-(cand_sims[t] - lam * cost[cand_idx[t]]), cost[cand_idx[t]], cand_idx[t]) for t in range(k)]
    return int(min(range(k), key=lambda t: keys[t]))


def route_cscr(
    index: FlatIndex,
    head: MlpHead,
    x: np.ndarray,
    cost: np.ndarray,
    lam: float,
    k: int = 4,
    query_id: str = "",
    literal_argmin: bool = False,
) -> RoutingDecision:
    """Route one embedding through the trained head and the exact index."""
    Q, _ = forward_batch(head, np.asarray(x, dtype=np.float64)[None, :], [query_id or "query"])
    cand_idx, cand_sims = top_k_batch(index, Q, k)
    t = select_cscr(cand_idx[0], cand_sims[0], cost, lam, literal_argmin)
    j = int(cand_idx[0][t])
    sim = float(cand_sims[0][t])
    score = sim + lam * cost[j] if literal_argmin else sim - lam * cost[j]
    return RoutingDecision(query_id=query_id, expert_id=index.ids[j], similarity=sim,
                           cost=float(cost[j]), score=float(score), policy="cscr")


def route_oracle(
    quality_row: np.ndarray,
    cost: np.ndarray,
    ids: tuple[str, ...],
    theta_pos: float = 0.5,
    query_id: str = "",
) -> RoutingDecision:
    """Hindsight pick: cheapest correct expert, else cheapest among the best."""
    j = _oracle_choice(np.asarray(quality_row, dtype=np.float64), np.asarray(cost), theta_pos)
    return RoutingDecision(query_id=query_id, expert_id=ids[j], similarity=None,
                           cost=float(cost[j]), score=-float(cost[j]), policy="oracle")


def _oracle_choice(quality_row: np.ndarray, cost: np.ndarray, theta_pos: float) -> int:
    correct = quality_row >= theta_pos
    if not correct.any():
        correct = quality_row == quality_row.max()
    masked = np.where(correct, cost, np.inf)
    return int(np.argmin(masked))  # first occurrence = lowest pool index on ties


def route_random(ids: tuple[str, ...], cost: np.ndarray, rng: np.random.Generator,
                 query_id: str = "") -> RoutingDecision:
    j = int(rng.integers(0, len(ids)))
    return RoutingDecision(query_id=query_id, expert_id=ids[j], similarity=None,
                           cost=float(cost[j]), score=0.0, policy="random")


def pareto_frontier(cost: np.ndarray, quality: np.ndarray) -> np.ndarray:
    """Indices of experts not dominated in (cost down, quality up), ascending."""
    cost = np.asarray(cost, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    M = cost.size
    keep = []
    for m in range(M):
        dominated = False
        for o in range(M):
            if o == m:
                continue
            if cost[o] <= cost[m] and quality[o] >= quality[m] and (
                cost[o] < cost[m] or quality[o] > quality[m]
            ):
                dominated = True
                break
        if not dominated:
            keep.append(m)
    return np.asarray(keep, dtype=np.int64)


def pareto_budget(frontier_cost: np.ndarray, lam: float, lambda_max: float) -> float:
    """Map lambda linearly onto [cheapest, most expensive] frontier cost."""
    lo, hi = float(frontier_cost.min()), float(frontier_cost.max())
    if lambda_max <= 0:
        return hi
    frac = min(max(lam / lambda_max, 0.0), 1.0)
    return hi + (lo - hi) * frac


def route_pareto_random(
    ids: tuple[str, ...],
    cost: np.ndarray,
    train_mean_quality: np.ndarray,
    lam: float,
    lambda_max: float,
    rng: np.random.Generator,
    query_id: str = "",
) -> RoutingDecision:
    frontier = pareto_frontier(cost, train_mean_quality)
    budget = pareto_budget(cost[frontier], lam, lambda_max)
    eligible = frontier[cost[frontier] <= budget + 1e-12]
    j = int(rng.choice(eligible))
    return RoutingDecision(query_id=query_id, expert_id=ids[j], similarity=None,
                           cost=float(cost[j]), score=0.0, policy="pareto_random")


@dataclass
class ThompsonState:
    """Beta(alpha, beta) posterior per expert, starting from Beta(1, 1)."""

    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def fresh(cls, M: int) -> "ThompsonState":
        return cls(alpha=np.ones(M), beta=np.ones(M))


def route_thompson(
    state: ThompsonState,
    cost: np.ndarray,
    lam: float,
    rng: np.random.Generator,
    ids: tuple[str, ...],
    query_id: str = "",
) -> RoutingDecision:
    theta = rng.beta(state.alpha, state.beta)
    scores = theta - lam * np.asarray(cost)
    j = int(np.argmax(scores))
    return RoutingDecision(query_id=query_id, expert_id=ids[j], similarity=None,
                           cost=float(cost[j]), score=float(scores[j]), policy="thompson")


def update_thompson(
    state: ThompsonState,
    decision_index: int,
    observed_quality: float,
    theta_pos: float = 0.5,
) -> None:
    """Increment the chosen arm's success or failure count by exactly one."""
    if observed_quality >= theta_pos:
        state.alpha[decision_index] += 1.0
    else:
        state.beta[decision_index] += 1.0


# ---------------------------------------------------------------------------
# batch policies bound to a fixed evaluation set
# ---------------------------------------------------------------------------

class CscrPolicy:
    """Retrieval cached once; lambda only rescales the cost term."""

    name = "cscr"

    def __init__(self, index: FlatIndex, head: MlpHead, X: np.ndarray, cost: np.ndarray,
                 k: int = 4, literal_argmin: bool = False, query_ids: list[str] | None = None):
        Q, _ = forward_batch(head, X, query_ids)
        self.cand_idx, self.cand_sims = top_k_batch(index, Q, k)
        self.cost = np.asarray(cost, dtype=np.float64)
        self.literal_argmin = literal_argmin

    def select(self, lam: float, lam_index: int) -> tuple[np.ndarray, np.ndarray | None]:
        n = self.cand_idx.shape[0]
        chosen = np.empty(n, dtype=np.int64)
        sims = np.empty(n)
        for i in range(n):
            t = select_cscr(self.cand_idx[i], self.cand_sims[i], self.cost, lam, self.literal_argmin)
            chosen[i] = self.cand_idx[i][t]
            sims[i] = self.cand_sims[i][t]
        return chosen, sims


class OraclePolicy:
    name = "oracle"

    def __init__(self, quality: np.ndarray, cost: np.ndarray, theta_pos: float = 0.5):
        self._chosen = np.array(
            [_oracle_choice(row, cost, theta_pos) for row in np.atleast_2d(quality)], dtype=np.int64
        )

    def select(self, lam: float, lam_index: int) -> tuple[np.ndarray, None]:
        return self._chosen, None


class RandomPolicy:
    name = "random"

    def __init__(self, n_queries: int, M: int, seed: int = 0):
        self.n = n_queries
        self.M = M
        self.seed = seed

    def select(self, lam: float, lam_index: int) -> tuple[np.ndarray, None]:
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 101, lam_index])
        return rng.integers(0, self.M, size=self.n), None


class ParetoRandomPolicy:
    name = "pareto_random"

    def __init__(self, cost: np.ndarray, train_mean_quality: np.ndarray, n_queries: int,
                 lambda_max: float, seed: int = 0):
        self.cost = np.asarray(cost, dtype=np.float64)
        self.frontier = pareto_frontier(self.cost, train_mean_quality)
        self.n = n_queries
        self.lambda_max = lambda_max
        self.seed = seed

    def select(self, lam: float, lam_index: int) -> tuple[np.ndarray, None]:
        budget = pareto_budget(self.cost[self.frontier], lam, self.lambda_max)
        eligible = self.frontier[self.cost[self.frontier] <= budget + 1e-12]
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 211, lam_index])
        return rng.choice(eligible, size=self.n), None


class ThompsonPolicy:
    """Fresh posteriors per operating point, updated along the query stream."""

    name = "thompson"

    def __init__(self, quality: np.ndarray, cost: np.ndarray, theta_pos: float = 0.5, seed: int = 0):
        self.quality = np.atleast_2d(quality)
        self.cost = np.asarray(cost, dtype=np.float64)
        self.theta_pos = theta_pos
        self.seed = seed

    def select(self, lam: float, lam_index: int) -> tuple[np.ndarray, None]:
        n, M = self.quality.shape
        rng = np.random.default_rng([self.seed & 0xFFFFFFFF, 307, lam_index])
        state = ThompsonState.fresh(M)
        chosen = np.empty(n, dtype=np.int64)
        for i in range(n):
            theta = rng.beta(state.alpha, state.beta)
            j = int(np.argmax(theta - lam * self.cost))
            chosen[i] = j
            update_thompson(state, j, float(self.quality[i, j]), self.theta_pos)
        return chosen, None


class FixedExpertPolicy:
    """Always route to one expert; useful as a single-expert reference."""

    name = "fixed"

    def __init__(self, expert_index: int, n_queries: int):
        self._chosen = np.full(n_queries, expert_index, dtype=np.int64)

    def select(self, lam: float, lam_index: int) -> tuple[np.ndarray, None]:
        return self._chosen, None


def make_policy(
    name: str,
    *,
    cost: np.ndarray,
    quality: np.ndarray,
    X: np.ndarray | None = None,
    index: FlatIndex | None = None,
    head: MlpHead | None = None,
    k: int = 4,
    seed: int = 0,
    theta_pos: float = 0.5,
    train_mean_quality: np.ndarray | None = None,
    lambda_max: float = 2.0,
    literal_argmin: bool = False,
    query_ids: list[str] | None = None,
):
    """Bind a named policy to a fixed evaluation set."""
    n = np.atleast_2d(quality).shape[0]
    if name == "cscr":
        if index is None or head is None or X is None:
            raise ConfigError("cscr policy needs an index, a trained head, and query embeddings")
        return CscrPolicy(index, head, X, cost, k=k, literal_argmin=literal_argmin, query_ids=query_ids)
    if name == "oracle":
        return OraclePolicy(quality, cost, theta_pos)
    if name == "random":
        return RandomPolicy(n, len(cost), seed)
    if name == "pareto_random":
        if train_mean_quality is None:
            raise ConfigError("pareto_random policy needs per-expert mean training quality")
        return ParetoRandomPolicy(cost, train_mean_quality, n, lambda_max, seed)
    if name == "thompson":
        return ThompsonPolicy(quality, cost, theta_pos, seed)
    raise ConfigError(f"unknown policy '{name}' (choose from {POLICIES})")
