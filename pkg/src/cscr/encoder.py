"""Trainable two-layer projection head with exact analytic gradients.

Maps a frozen query embedding x (dim D) into descriptor space (dim D')::

    q = normalize(W2 @ act(W1 @ x + b1) + b2)

The output is always l2-normalized so inner products against unit descriptors
are cosine similarities. ``backward`` propagates an upstream dL/dq through the
normalization Jacobian and both layers; no autodiff framework is involved, so
the gradients can be checked against central finite differences directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

_SQRT_2_OVER_PI = 0.7978845608028654  # sqrt(2/pi)
_GELU_C = 0.044715


def _tanh(z: np.ndarray) -> np.ndarray:
    return np.tanh(z)


def _tanh_prime(z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return 1.0 - a * a


def _gelu(z: np.ndarray) -> np.ndarray:
    return 0.5 * z * (1.0 + np.tanh(_SQRT_2_OVER_PI * (z + _GELU_C * z**3)))


def _gelu_prime(z: np.ndarray, a: np.ndarray) -> np.ndarray:
    t = np.tanh(_SQRT_2_OVER_PI * (z + _GELU_C * z**3))
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * z**2)


ACTIVATIONS = {"tanh": (_tanh, _tanh_prime), "gelu": (_gelu, _gelu_prime)}


@dataclass
class MlpHead:
    W1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    W2: np.ndarray  # (Dp, H)
    b2: np.ndarray  # (Dp,)
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def output_dim(self) -> int:
        return self.W2.shape[0]

    @property
    def n_params(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class ForwardCache:
    X: np.ndarray
    Z1: np.ndarray
    A1: np.ndarray
    U: np.ndarray      # pre-normalization output
    norms: np.ndarray  # ||U|| per row
    Q: np.ndarray      # normalized output


def init_head(D: int, H: int, Dp: int, seed: int, activation: str = "tanh") -> MlpHead:
    """Fan-in-scaled symmetric uniform weights, zero biases, deterministic under seed."""
    if min(D, H, Dp) < 1:
        raise ConfigError(f"head dims must be >= 1, got D={D}, H={H}, Dp={Dp}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation '{activation}' (choose from {sorted(ACTIVATIONS)})")
    rng = np.random.default_rng(seed)
    s1 = 1.0 / np.sqrt(D)
    s2 = 1.0 / np.sqrt(H)
    return MlpHead(
        W1=rng.uniform(-s1, s1, size=(H, D)),
        b1=np.zeros(H),
        W2=rng.uniform(-s2, s2, size=(Dp, H)),
        b2=np.zeros(Dp),
        activation=activation,
    )


def forward_batch(
    head: MlpHead, X: np.ndarray, query_ids: list[str] | None = None
) -> tuple[np.ndarray, ForwardCache]:
    """Project a batch (n, D) to unit query vectors (n, D'), keeping the cache for backward."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != head.input_dim:
        raise DataError(f"embedding dim {X.shape[1]} does not match head input dim {head.input_dim}")
    act, _ = ACTIVATIONS[head.activation]
    Z1 = X @ head.W1.T + head.b1
    A1 = act(Z1)
    U = A1 @ head.W2.T + head.b2
    norms = np.linalg.norm(U, axis=1)
    dead = norms < 1e-30
    if np.any(dead):
        idx = int(np.argmax(dead))
        label = query_ids[idx] if query_ids is not None else f"row {idx}"
        raise DataError(f"head produced a zero vector for query '{label}'")
    Q = U / norms[:, None]
    return Q, ForwardCache(X=X, Z1=Z1, A1=A1, U=U, norms=norms, Q=Q)


def forward(head: MlpHead, x: np.ndarray, query_id: str | None = None) -> np.ndarray:
    """Single-query forward; returns a unit vector of dimension D'."""
    ids = [query_id] if query_id is not None else None
    Q, _ = forward_batch(head, np.asarray(x, dtype=np.float64)[None, :], ids)
    return Q[0]


def backward(head: MlpHead, cache: ForwardCache, dQ: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients for an upstream dL/dQ of shape (n, D')."""
    dQ = np.asarray(dQ, dtype=np.float64)
    if dQ.shape != cache.Q.shape:
        raise DataError(f"upstream gradient shape {dQ.shape} does not match output {cache.Q.shape}")
    _, act_prime = ACTIVATIONS[head.activation]
    # Through q = u / ||u||:  dL/du = (g - (g . q) q) / ||u||
    dU = (dQ - (dQ * cache.Q).sum(axis=1, keepdims=True) * cache.Q) / cache.norms[:, None]
    dW2 = dU.T @ cache.A1
    db2 = dU.sum(axis=0)
    dA1 = dU @ head.W2
    dZ1 = dA1 * act_prime(cache.Z1, cache.A1)
    dW1 = dZ1.T @ cache.X
    db1 = dZ1.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


# ---------------------------------------------------------------------------
# checkpoint: length-prefixed JSON header + dense float64 payload
# ---------------------------------------------------------------------------

_CKPT_FORMAT = "cscr-head-v1"


def save_checkpoint(path: str | Path, head: MlpHead, meta: dict | None = None) -> None:
    header = {
        "format": _CKPT_FORMAT,
        "dims": {"input": head.input_dim, "hidden": head.hidden_dim, "output": head.output_dim},
        "activation": head.activation,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.concatenate([p.ravel() for p in (head.W1, head.b1, head.W2, head.b2)])
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload.astype(np.float64).tobytes())


def load_checkpoint(path: str | Path) -> tuple[MlpHead, dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format") != _CKPT_FORMAT:
            raise DataError(f"{path}: unknown checkpoint format '{header.get('format')}'")
        D = header["dims"]["input"]
        H = header["dims"]["hidden"]
        Dp = header["dims"]["output"]
        payload = np.frombuffer(fh.read(), dtype=np.float64)
    expected = H * D + H + Dp * H + Dp
    if payload.size != expected:
        raise DataError(f"{path}: payload holds {payload.size} values, dims imply {expected}")
    i = 0
    W1 = payload[i : i + H * D].reshape(H, D).copy(); i += H * D
    b1 = payload[i : i + H].copy(); i += H
    W2 = payload[i : i + Dp * H].reshape(Dp, H).copy(); i += Dp * H
    b2 = payload[i : i + Dp].copy()
    head = MlpHead(W1=W1, b1=b1, W2=W2, b2=b2, activation=header["activation"])
    return head, header.get("meta", {})
