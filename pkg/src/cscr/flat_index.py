"""Exact top-k inner-product lookup over unit expert descriptors.

A dense (M, D') key matrix searched by brute force. Keys and queries are unit
vectors, so inner product equals cosine similarity. Pool sizes here are small
(tens to hundreds of experts), so exact full scoring is both fast and removes
any approximation confound; swapping an expert in or out is a rebuild, which
never touches the trained head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .descriptors import Descriptor, descriptor_matrix
from .errors import ConfigError, DataError

_KEY_NORM_ATOL = 1e-6


@dataclass(frozen=True)
class FlatIndex:
    keys: np.ndarray        # (M, D') unit rows, read-only
    ids: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]


def build_index(descriptors: list[Descriptor]) -> FlatIndex:
    """Index all descriptors in the given (pool) order."""
    if not descriptors:
        raise DataError("cannot build an index over zero descriptors")
    keys = descriptor_matrix(descriptors)
    norms = np.linalg.norm(keys, axis=1)
    bad = np.abs(norms - 1.0) > _KEY_NORM_ATOL
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DataError(f"key '{descriptors[i].expert_id}' has norm {norms[i]}, expected 1")
    keys = keys.copy()
    keys.flags.writeable = False
    return FlatIndex(keys=keys, ids=tuple(d.expert_id for d in descriptors))


def top_k(index: FlatIndex, q: np.ndarray, k: int) -> list[tuple[str, float]]:
    """The k largest inner products, descending; ties break toward lower pool index."""
    if not 1 <= k <= index.size:
        raise ConfigError(f"k={k} out of range for an index of {index.size} keys")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise DataError(f"query shape {q.shape} does not match index dim {index.dim}")
    sims = index.keys @ q
    order = np.argsort(-sims, kind="stable")[:k]
    return [(index.ids[i], float(sims[i])) for i in order]


def top_k_batch(index: FlatIndex, Q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized top-k for a (n, D') query block: (indices (n, k), sims (n, k))."""
    if not 1 <= k <= index.size:
        raise ConfigError(f"k={k} out of range for an index of {index.size} keys")
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    sims = Q @ index.keys.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(sims, order, axis=1)
