"""Seeded synthetic pools and queries with planted, checkable structure.

The generator plants a cluster geometry: query embeddings scatter around unit
centroids in embedding space, and each expert's descriptor is a nonnegative
mixture of per-cluster anchor directions weighted by its competence on that
cluster. Competent experts therefore sit measurably closer to their clusters'
anchors, which is exactly the signal a trained router should recover.
Per-query quality is Bernoulli with the planted competence, so every routing
and training claim can be checked against known probabilities.

Anchors occupy disjoint coordinate blocks of descriptor space (orthogonal and
nonnegative), which also lets ``make_logit_probes`` emit probe tensors whose
averaged-probability footprints reproduce the planted descriptors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    Expert,
    ExpertPool,
    QueryRecord,
    _freeze,
    write_expert_pool,
    write_probe_data,
    write_query_dataset,
)
from .descriptors import Descriptor, save_descriptors
from .errors import ConfigError

FIXTURE_SEED = 20250809


@dataclass
class SynthConfig:
    n_clusters: int = 4
    n_experts: int = 12
    n_train: int = 3000
    n_test: int = 1000
    embed_dim: int = 32
    descriptor_dim: int = 16
    noise_sigma: float = 0.25
    cost_tiers: tuple[float, ...] = (1.0, 4.0, 16.0)
    competence: np.ndarray | None = None  # (n_clusters, n_experts); default is planted
    correlated_cost_quality: bool = True
    cost_jitter: float = 0.05
    seed: int = FIXTURE_SEED

    def validate(self) -> None:
        if self.n_clusters < 1:
            raise ConfigError(f"need at least one cluster, got {self.n_clusters}")
        if self.n_experts < 1:
            raise ConfigError(f"need at least one expert, got {self.n_experts}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("need at least one train and one test query")
        if self.descriptor_dim < self.n_clusters:
            raise ConfigError(
                f"descriptor_dim {self.descriptor_dim} must be >= n_clusters {self.n_clusters}"
            )
        if not self.cost_tiers:
            raise ConfigError("need at least one cost tier")
        if any(t < 0 for t in self.cost_tiers):
            raise ConfigError("cost tiers must be nonnegative")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.competence is not None:
            comp = np.asarray(self.competence)
            if comp.shape != (self.n_clusters, self.n_experts):
                raise ConfigError(
                    f"competence shape {comp.shape} must be ({self.n_clusters}, {self.n_experts})"
                )
            if np.any(comp < 0) or np.any(comp > 1):
                raise ConfigError("competence entries must lie in [0, 1]")


@dataclass(frozen=True)
class PlantedTruth:
    cluster_of: dict[str, int]
    cheapest_competent: dict[int, str]
    competence: np.ndarray
    tier_of: np.ndarray


@dataclass(frozen=True)
class SynthResult:
    pool: ExpertPool
    descriptors: list[Descriptor]
    records: list[QueryRecord]
    truth: PlantedTruth
    config: SynthConfig


def default_competence(n_clusters: int, n_experts: int, n_tiers: int,
                       correlated: bool = True) -> np.ndarray:
    """Planted competence: each expert is strong on its home cluster, with a
    tier-dependent baseline elsewhere. Higher tiers (more expensive) get a
    higher baseline when ``correlated``; reversed otherwise."""
    base = np.linspace(0.08, 0.65, n_tiers)
    home = np.linspace(0.92, 0.985, n_tiers)
    if not correlated:
        base = base[::-1].copy()
        home = home[::-1].copy()
    comp = np.empty((n_clusters, n_experts))
    for m in range(n_experts):
        t = m * n_tiers // n_experts
        h = m % n_clusters
        comp[:, m] = base[t]
        comp[h, m] = home[t]
    return comp


def default_fixture(seed: int = FIXTURE_SEED) -> SynthConfig:
    """The canonical desk-scale benchmark: 4 clusters, 12 experts, 3 cost tiers."""
    return SynthConfig(seed=seed)


def generate(config: SynthConfig) -> SynthResult:
    """Generate pool, planted descriptors, queries, and the planted truth."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n_tiers = len(config.cost_tiers)
    tier_of = np.array([m * n_tiers // config.n_experts for m in range(config.n_experts)])

    # Raw costs: tier value plus a small positive jitter so costs are distinct
    # within a tier (keeps quantile bands informative).
    jitter = rng.uniform(0.0, config.cost_jitter, size=config.n_experts)
    costs_raw = np.array([config.cost_tiers[t] for t in tier_of]) * (1.0 + jitter)

    comp = config.competence
    if comp is None:
        comp = default_competence(config.n_clusters, config.n_experts, n_tiers,
                                  config.correlated_cost_quality)
    comp = np.asarray(comp, dtype=np.float64)

    pool = ExpertPool(experts=tuple(
        Expert(id=f"expert-{m:02d}", cost_raw=float(costs_raw[m]), kind="logit")
        for m in range(config.n_experts)
    ))

    # Per-cluster anchors on disjoint nonnegative coordinate blocks.
    anchors = np.zeros((config.n_clusters, config.descriptor_dim))
    block = config.descriptor_dim // config.n_clusters
    for c in range(config.n_clusters):
        lo = c * block
        hi = lo + block if c < config.n_clusters - 1 else config.descriptor_dim
        vals = rng.uniform(0.5, 1.0, size=hi - lo)
        anchors[c, lo:hi] = vals / np.linalg.norm(vals)

    descriptors: list[Descriptor] = []
    for m in range(config.n_experts):
        vec = comp[:, m] @ anchors + 0.02 * np.abs(rng.normal(size=config.descriptor_dim))
        vec = vec / np.linalg.norm(vec)
        descriptors.append(Descriptor(expert_id=pool.ids[m], kind="logit", vector=_freeze(vec)))

    cheapest_competent: dict[int, str] = {}
    for c in range(config.n_clusters):
        able = [m for m in range(config.n_experts) if comp[c, m] >= 0.5]
        if able:
            best = min(able, key=lambda m: (costs_raw[m], m))
            cheapest_competent[c] = pool.ids[best]

    centroids = rng.normal(size=(config.n_clusters, config.embed_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    records: list[QueryRecord] = []
    cluster_of: dict[str, int] = {}
    for split, count in (("train", config.n_train), ("test", config.n_test)):
        for i in range(count):
            c = int(rng.integers(0, config.n_clusters))
            emb = centroids[c] + config.noise_sigma * rng.normal(size=config.embed_dim)
            quality = (rng.random(config.n_experts) < comp[c]).astype(np.float64)
            qid = f"{split}-{i:05d}"
            cluster_of[qid] = c
            records.append(QueryRecord(
                query_id=qid, embedding=_freeze(emb), quality=_freeze(quality), split=split,
            ))

    truth = PlantedTruth(
        cluster_of=cluster_of,
        cheapest_competent=cheapest_competent,
        competence=_freeze(comp),
        tier_of=_freeze(tier_of),
    )
    return SynthResult(pool=pool, descriptors=descriptors, records=records, truth=truth,
                       config=config)


def make_logit_probes(
    result: SynthResult,
    n_probes: int | None = None,
    t_steps: int = 3,
    jitter: float = 1e-3,
    seed: int | None = None,
) -> tuple[list[int], np.ndarray]:
    """Probe tensor whose averaged footprint reproduces each planted descriptor.

    Token v's probability under expert m is proportional to the descriptor
    coordinate, scaled so per-step mass stays below 1; a small jitter keeps
    the tensor nondegenerate. Returns (token_ids, probs (E, N, T, V))."""
    config = result.config
    V = config.descriptor_dim
    N = n_probes if n_probes is not None else V
    rng = np.random.default_rng(config.seed + 1 if seed is None else seed)
    E = len(result.descriptors)
    probs = np.empty((E, N, t_steps, V), dtype=np.float64)
    for m, desc in enumerate(result.descriptors):
        profile = desc.vector
        base = profile * (0.9 / profile.sum())
        noise = jitter * rng.uniform(-1.0, 1.0, size=(N, t_steps, V))
        block = np.clip(base[None, None, :] + noise, 0.0, 1.0)
        mass = block.sum(axis=2, keepdims=True)
        np.divide(block, mass, out=block, where=mass > 1.0)
        probs[m] = block
    return list(range(V)), probs


def write_dataset(result: SynthResult, out_dir: str | Path,
                  emit_probes: bool = False) -> dict[str, str]:
    """Emit the standard file formats so the full pipeline runs unmodified."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "pool": str(out_dir / "pool.jsonl"),
        "queries": str(out_dir / "queries.jsonl"),
        "descriptors": str(out_dir / "descriptors.jsonl"),
        "truth": str(out_dir / "truth.json"),
    }
    write_expert_pool(result.pool, paths["pool"])
    write_query_dataset(result.records, result.pool, paths["queries"])
    save_descriptors(result.descriptors, paths["descriptors"])
    truth_obj = {
        "cluster_of": result.truth.cluster_of,
        "cheapest_competent": {str(c): eid for c, eid in result.truth.cheapest_competent.items()},
        "competence": [[float(v) for v in row] for row in result.truth.competence],
        "tier_of": [int(t) for t in result.truth.tier_of],
    }
    (out_dir / "truth.json").write_text(json.dumps(truth_obj, sort_keys=True, indent=2) + "\n",
                                        encoding="utf-8")
    if emit_probes:
        token_ids, probs = make_logit_probes(result)
        write_probe_data(out_dir / "probes.json", "logit", result.pool.ids, probs, token_ids)
        paths["probes"] = str(out_dir / "probes.json")
    return paths
