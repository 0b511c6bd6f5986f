"""Expert fingerprints: unit-norm vectors that key the shared metric space.

Two kinds:

* logit footprint — average next-token probability over probes and decode
  steps, restricted to a shared basis of the highest-mass tokens, then
  l2-normalized (dimension = basis size).
* perplexity fingerprint — the expert's per-probe score vector standardized
  to mean 0 / variance 1 and then l2-normalized (dimension = probe count).

Both land on the unit sphere, so inner product equals cosine similarity and
the two kinds can share one index when their dimensions agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DESCRIPTOR_KINDS, ExpertPool, LogitProbeTensor, PerplexityTable, _freeze
from .errors import DataError

UNIT_NORM_ATOL = 1e-9


@dataclass(frozen=True)
class TokenBasis:
    """Ordered token ids spanning the logit-footprint coordinate system."""

    token_ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.token_ids:
            raise DataError("empty token basis")
        if len(self.token_ids) != len(set(self.token_ids)):
            raise DataError("duplicate token id in basis")

    @property
    def K(self) -> int:
        return len(self.token_ids)


@dataclass(frozen=True)
class Descriptor:
    expert_id: str
    kind: str
    vector: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in DESCRIPTOR_KINDS:
            raise DataError(f"descriptor '{self.expert_id}': unknown kind '{self.kind}'")
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > UNIT_NORM_ATOL:
            raise DataError(f"descriptor '{self.expert_id}': norm {norm} is not 1 within {UNIT_NORM_ATOL}")

    @property
    def dim(self) -> int:
        return self.vector.size


def select_token_basis(probes: LogitProbeTensor, K: int) -> TokenBasis:
    """Pick the K tokens with the greatest total probability mass.

    Mass is summed over all experts, probes, and steps; ties break toward the
    smaller token id so the basis is deterministic.
    """
    n_tokens = len(probes.token_ids)
    if K < 1:
        raise DataError(f"basis size must be >= 1, got {K}")
    if K > n_tokens:
        raise DataError(f"basis size {K} exceeds the {n_tokens} tokens present")
    mass = probes.probs.astype(np.float64).sum(axis=(0, 1, 2))
    ids = np.asarray(probes.token_ids)
    order = np.lexsort((ids, -mass))
    return TokenBasis(token_ids=tuple(int(t) for t in ids[order[:K]]))


def logit_footprint(probes: LogitProbeTensor, basis: TokenBasis, expert_id: str) -> Descriptor:
    """Average probability of each basis token over probes and steps, l2-normalized."""
    if expert_id not in probes.expert_ids:
        raise DataError(f"expert '{expert_id}' not present in probe tensor")
    col_of = {tid: j for j, tid in enumerate(probes.token_ids)}
    missing = [t for t in basis.token_ids if t not in col_of]
    if missing:
        raise DataError(f"basis token {missing[0]} not present in probe tensor")
    e = probes.expert_ids.index(expert_id)
    cols = [col_of[t] for t in basis.token_ids]
    mean = probes.probs[e].astype(np.float64).mean(axis=(0, 1))[cols]
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise DataError(f"expert '{expert_id}': all basis probabilities are zero")
    return Descriptor(expert_id=expert_id, kind="logit", vector=_freeze(mean / norm))


def perplexity_fingerprint(table: PerplexityTable, expert_id: str) -> Descriptor:
    """Standardize the expert's per-probe scores (mean 0, variance 1), then l2-normalize."""
    if expert_id not in table.expert_ids:
        raise DataError(f"expert '{expert_id}' not present in perplexity table")
    e = table.expert_ids.index(expert_id)
    scores = table.scores[e].astype(np.float64)
    if scores.size < 2:
        raise DataError(f"expert '{expert_id}': need at least 2 probes, got {scores.size}")
    std = float(scores.std())  # population std
    if std == 0.0:
        raise DataError(f"expert '{expert_id}': zero variance across probes")
    standardized = (scores - scores.mean()) / std
    vec = standardized / float(np.linalg.norm(standardized))
    return Descriptor(expert_id=expert_id, kind="perplexity", vector=_freeze(vec))


def descriptor_similarity_matrix(descs: list[Descriptor]) -> np.ndarray:
    """Pairwise cosine similarity; symmetric with unit diagonal."""
    if not descs:
        raise DataError("no descriptors")
    dims = {d.dim for d in descs}
    if len(dims) > 1:
        raise DataError(f"descriptor dimension mismatch: {sorted(dims)}")
    V = np.stack([d.vector for d in descs])
    return V @ V.T


def build_pool_descriptors(
    pool: ExpertPool,
    logit_probes: LogitProbeTensor | None = None,
    ppl_table: PerplexityTable | None = None,
    basis_size: int = 256,
) -> tuple[list[Descriptor], TokenBasis | None]:
    """Build one descriptor per pool expert, in pool order.

    Mixed pools (both kinds present) are only representable when the logit
    basis size equals the perplexity probe count, so both kinds share one
    dimension; that equality is enforced here and nowhere else.
    """
    kinds = set(pool.kinds)
    if "logit" in kinds and logit_probes is None:
        raise DataError("pool contains logit experts but no logit probes were given")
    if "perplexity" in kinds and ppl_table is None:
        raise DataError("pool contains perplexity experts but no perplexity table was given")
    if kinds == {"logit", "perplexity"}:
        assert ppl_table is not None
        if basis_size != ppl_table.n_probes:
            raise DataError(
                f"mixed pool: logit basis size {basis_size} must equal the "
                f"perplexity probe count {ppl_table.n_probes}"
            )
    basis = select_token_basis(logit_probes, basis_size) if logit_probes is not None else None
    out: list[Descriptor] = []
    for e in pool.experts:
        if e.kind == "logit":
            assert logit_probes is not None and basis is not None
            out.append(logit_footprint(logit_probes, basis, e.id))
        else:
            assert ppl_table is not None
            out.append(perplexity_fingerprint(ppl_table, e.id))
    return out, basis


# ---------------------------------------------------------------------------
# descriptors.jsonl
# ---------------------------------------------------------------------------

def save_descriptors(descs: list[Descriptor], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in descs:
            obj = {"id": d.expert_id, "kind": d.kind, "vector": [float(v) for v in d.vector]}
            fh.write(json.dumps(obj) + "\n")


def load_descriptors(path: str | Path, pool: ExpertPool | None = None) -> list[Descriptor]:
    """Load ``descriptors.jsonl``; with a pool, validate coverage and reorder to pool order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"descriptor file not found: {path}")
    descs: list[Descriptor] = []
    with open(path, "r", encoding="utf-8") as fh:
        for row, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"descriptors line {row}: invalid JSON ({exc})") from None
            for key in ("id", "kind", "vector"):
                if key not in obj:
                    raise DataError(f"descriptors line {row}: missing field '{key}'")
            vec = np.asarray(obj["vector"], dtype=np.float64)
            descs.append(Descriptor(expert_id=obj["id"], kind=obj["kind"], vector=_freeze(vec)))
    if not descs:
        raise DataError(f"{path}: empty descriptor file")
    if pool is None:
        return descs
    by_id = {d.expert_id: d for d in descs}
    if len(by_id) != len(descs):
        raise DataError(f"{path}: duplicate descriptor id")
    missing = [eid for eid in pool.ids if eid not in by_id]
    if missing:
        raise DataError(f"{path}: missing descriptor for expert '{missing[0]}'")
    return [by_id[eid] for eid in pool.ids]


def descriptor_matrix(descs: list[Descriptor]) -> np.ndarray:
    """Stack descriptors into an (M, D') key matrix, preserving order."""
    dims = {d.dim for d in descs}
    if len(dims) != 1:
        raise DataError(f"descriptor dimension mismatch: {sorted(dims)}")
    return np.stack([d.vector for d in descs])
