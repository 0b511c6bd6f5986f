"""Cost-banded contrastive loss, its single-band special case, and training.

For query i with unit vector q, unit descriptors e_m, normalized costs c_m,
bands B_k with temperatures tau_k, positives P(i), and penalty gamma >= 0::

    l_i = -(1/|K_i|) * sum_{k in K_i} log( N_ik / D_ik )
    N_ik = sum_{m in P(i) & B_k} exp( (q . e_m) / tau_k )
    D_ik = sum_{m'=1..M}         exp( (q . e_m' - gamma * c_m') / tau_k )

where K_i is the set of bands holding at least one positive. The batch loss
is the mean of l_i. With a single band and gamma = 0 this reduces exactly to
the classic log-softmax contrastive objective over one global temperature,
which is implemented independently in ``vanilla_infonce_loss`` so the two
routes can cross-check each other.

Exponentials are max-shifted per (query, band), with the numerator and
denominator sharing one shift so the ratio is unaffected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cost_spectrum import BandPartition, CostModel, normalize_costs, partition_bands
from .dataio import ExpertPool, QueryRecord, split_matrices
from .descriptors import Descriptor, descriptor_matrix
from .encoder import MlpHead, backward, forward_batch, init_head
from .errors import ConfigError, CscrError, DataError


@dataclass
class TrainConfig:
    """Hyperparameters for contrastive head training."""

    epochs: int = 10
    batch_size: int = 512
    learning_rate: float = 5e-4
    gamma: float = 0.2
    num_bands: int = 5
    alpha: float = 0.25
    tau_min: float = 0.05
    seed: int = 0
    positive_threshold: float = 0.5
    threshold_mode: str = "absolute"  # or "relative": threshold * per-query max quality
    hidden_mult: float = 1.0
    activation: str = "tanh"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999

    def validate(self) -> None:
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.num_bands < 1:
            raise ConfigError(f"num_bands must be >= 1, got {self.num_bands}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not 0.0 <= self.positive_threshold <= 1.0:
            raise ConfigError(f"positive_threshold must be in [0, 1], got {self.positive_threshold}")
        if self.threshold_mode not in ("absolute", "relative"):
            raise ConfigError(f"unknown threshold_mode '{self.threshold_mode}'")
        if self.tau_min < 0 or self.alpha < 0:
            raise ConfigError("tau_min and alpha must be >= 0")
        if self.hidden_mult <= 0:
            raise ConfigError(f"hidden_mult must be > 0, got {self.hidden_mult}")


@dataclass(frozen=True)
class PositiveSets:
    """Boolean positives mask (n, M) plus which queries have any positive at all."""

    mask: np.ndarray
    active: np.ndarray

    @property
    def n_excluded(self) -> int:
        return int((~self.active).sum())


def build_positives(
    quality: np.ndarray, threshold: float, mode: str = "absolute"
) -> PositiveSets:
    """Threshold per-expert quality into positive sets.

    ``absolute`` marks experts with quality >= threshold. ``relative`` marks
    experts within threshold * (per-query max quality), the variant for
    continuous-quality datasets. Queries without positives are flagged
    inactive and must be excluded from the loss.
    """
    quality = np.atleast_2d(np.asarray(quality, dtype=np.float64))
    if mode == "absolute":
        mask = quality >= threshold
    elif mode == "relative":
        cut = threshold * quality.max(axis=1, keepdims=True)
        mask = (quality >= cut) & (quality > 0.0)
    else:
        raise ConfigError(f"unknown threshold_mode '{mode}'")
    active = mask.any(axis=1)
    mask = mask.copy()
    mask[~active] = False
    return PositiveSets(mask=mask, active=active)


def cs_infonce_loss_grad(
    Q: np.ndarray,
    E: np.ndarray,
    cost: np.ndarray,
    bands: BandPartition,
    pos_mask: np.ndarray,
    gamma: float,
) -> tuple[float, np.ndarray]:
    """Batch loss and its exact gradient with respect to the query vectors Q."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    E = np.asarray(E, dtype=np.float64)
    cost = np.asarray(cost, dtype=np.float64)
    pos_mask = np.atleast_2d(np.asarray(pos_mask, dtype=bool))
    B, M = pos_mask.shape
    if Q.shape[0] != B or E.shape[0] != M or cost.size != M:
        raise DataError("batch, descriptor, and cost shapes are not aligned")
    if gamma < 0:
        raise ConfigError(f"gamma must be >= 0, got {gamma}")
    if not pos_mask.any(axis=1).all():
        bad = int(np.argmin(pos_mask.any(axis=1)))
        raise DataError(f"batch row {bad} has an empty positive set")

    S = Q @ E.T  # (B, M)
    band_masks = [bands.band_of == k for k in range(bands.n_bands)]
    n_active_bands = np.zeros(B)
    for bmask in band_masks:
        n_active_bands += (pos_mask & bmask).any(axis=1)

    loss_i = np.zeros(B)
    dS = np.zeros_like(S)
    for k, bmask in enumerate(band_masks):
        pk = pos_mask & bmask
        has = pk.any(axis=1)
        if not has.any():
            continue
        tau = float(bands.temperature[k])
        num_args = np.where(pk, S / tau, -np.inf)
        den_args = (S - gamma * cost) / tau
        shift = np.maximum(num_args.max(axis=1), den_args.max(axis=1))  # shared per query
        en = np.exp(num_args - shift[:, None])
        ed = np.exp(den_args - shift[:, None])
        sn = en.sum(axis=1)
        sd = ed.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.log(sn) - np.log(sd)
            p_pos = en / sn[:, None]
            p_den = ed / sd[:, None]
        w = has / np.where(n_active_bands > 0, n_active_bands, 1.0)
        loss_i -= w * np.where(has, term, 0.0)
        dS += (w / tau)[:, None] * np.where(has[:, None], p_den - p_pos, 0.0)

    loss = float(loss_i.mean())
    dQ = (dS @ E) / B
    return loss, dQ


def cs_infonce_loss(
    Q: np.ndarray,
    E: np.ndarray,
    cost: np.ndarray,
    bands: BandPartition,
    pos_mask: np.ndarray,
    gamma: float,
) -> float:
    loss, _ = cs_infonce_loss_grad(Q, E, cost, bands, pos_mask, gamma)
    return loss


def vanilla_infonce_loss_grad(
    Q: np.ndarray, E: np.ndarray, pos_mask: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """Classic single-temperature log-softmax contrastive loss and its Q-gradient.

    Kept as a standalone implementation (not a call into the banded loss) so
    the single-band collapse identity is a genuine two-route check.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    E = np.asarray(E, dtype=np.float64)
    pos_mask = np.atleast_2d(np.asarray(pos_mask, dtype=bool))
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if not pos_mask.any(axis=1).all():
        bad = int(np.argmin(pos_mask.any(axis=1)))
        raise DataError(f"batch row {bad} has an empty positive set")
    B = Q.shape[0]
    S = Q @ E.T
    args = S / tau
    shift = args.max(axis=1)
    ea = np.exp(args - shift[:, None])
    total = ea.sum(axis=1)
    pos = (ea * pos_mask).sum(axis=1)
    loss = float(-(np.log(pos) - np.log(total)).mean())
    p_all = ea / total[:, None]
    p_pos = np.where(pos_mask, ea, 0.0) / pos[:, None]
    dS = (p_all - p_pos) / tau
    dQ = (dS @ E) / B
    return loss, dQ


def vanilla_infonce_loss(Q: np.ndarray, E: np.ndarray, pos_mask: np.ndarray, tau: float) -> float:
    loss, _ = vanilla_infonce_loss_grad(Q, E, pos_mask, tau)
    return loss


class AdamW:
    """Adaptive moments with decoupled weight decay over a dict of parameters."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / bc1
            vhat = self.v[k] / bc2
            p -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p)


@dataclass
class TrainResult:
    head: MlpHead
    manifest: dict
    losses: list[tuple[int, float]] = field(default_factory=list)


def config_hash(config: dict) -> str:
    """Stable short digest of a fully resolved configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def train(
    records: list[QueryRecord],
    pool: ExpertPool,
    descriptors: list[Descriptor],
    config: TrainConfig,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train the projection head on the train split; deterministic under config.seed.

    Emits a per-epoch loss log and a manifest carrying every hyperparameter,
    the band edges, and the resolved config hash. Queries without a positive
    expert are excluded from the loss and counted in the manifest.
    """
    config.validate()
    cost_model = normalize_costs(pool)
    bands = partition_bands(cost_model, config.num_bands, config.tau_min, config.alpha)
    E = descriptor_matrix(descriptors)
    if E.shape[0] != pool.M:
        raise DataError(f"{E.shape[0]} descriptors for {pool.M} experts")

    ids, X, quality = split_matrices(records, "train")
    positives = build_positives(quality, config.positive_threshold, config.threshold_mode)
    keep = positives.active
    ids = [qid for qid, k in zip(ids, keep) if k]
    X = X[keep]
    pos_mask = positives.mask[keep]
    n_used = X.shape[0]
    if n_used == 0:
        raise DataError("every training query has an empty positive set")

    D = X.shape[1]
    H = max(1, round(config.hidden_mult * D))
    head = init_head(D, H, E.shape[1], seed=_child_seed(config.seed, 0), activation=config.activation)
    opt = AdamW(head.params(), lr=config.learning_rate, beta1=config.beta1,
                beta2=config.beta2, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng(_child_seed(config.seed, 1))

    losses: list[tuple[int, float]] = []
    for epoch in range(config.epochs):
        perm = shuffle_rng.permutation(n_used)
        epoch_loss = 0.0
        for start in range(0, n_used, config.batch_size):
            rows = perm[start : start + config.batch_size]
            batch_ids = [ids[r] for r in rows]
            Q, cache = forward_batch(head, X[rows], batch_ids)
            loss, dQ = cs_infonce_loss_grad(Q, E, cost_model.cost, bands, pos_mask[rows], config.gamma)
            if not np.isfinite(loss):
                raise CscrError(f"non-finite loss in batch starting with queries {batch_ids[:5]}")
            grads = backward(head, cache, dQ)
            opt.step(head.params(), grads)
            epoch_loss += loss * rows.size
        losses.append((epoch, epoch_loss / n_used))

    cfg_dict = asdict(config)
    manifest = {
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        "dims": {"input": D, "hidden": H, "output": E.shape[1]},
        "band_edges": [float(v) for v in bands.edges],
        "band_mean_cost": [float(v) for v in bands.mean_cost],
        "band_temperature": [float(v) for v in bands.temperature],
        "n_experts": pool.M,
        "n_train_used": n_used,
        "excluded_queries": positives.n_excluded,
    }
    result = TrainResult(head=head, manifest=manifest, losses=losses)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        with open(out_dir / "losses.csv", "w", encoding="utf-8") as fh:
            fh.write("epoch,loss,excluded_queries\n")
            for epoch, loss in losses:
                fh.write(f"{epoch},{loss!r},{positives.n_excluded}\n")
    return result


def _child_seed(seed: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, stream])
