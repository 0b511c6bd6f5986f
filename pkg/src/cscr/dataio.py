"""On-disk formats and validated in-memory records.

Three file families:

* ``pool.jsonl``    — one expert per line: ``{"id", "cost", "kind"}``.
* ``queries.jsonl`` — one query per line: ``{"id", "split", "embedding", "quality"}``,
  where ``quality`` maps expert id -> score in [0, 1].
* ``probes.bin`` + ``probes.json`` — dense row-major payload plus a JSON sidecar
  header ``{"kind", "expert_ids", "shape", "dtype"}`` (and ``"token_ids"`` for
  logit probes).

Everything returned by the loaders is validated and frozen: arrays are marked
read-only, alignment to the expert pool is by id (never by position), and the
pool file's row order is the canonical expert index order downstream.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

DESCRIPTOR_KINDS = ("logit", "perplexity")
SPLITS = ("train", "test")

_PROBE_DTYPES = {"f32": np.float32, "f64": np.float64}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Expert:
    id: str
    cost_raw: float
    kind: str


@dataclass(frozen=True)
class ExpertPool:
    """The expert roster; file row order defines the canonical index order."""

    experts: tuple[Expert, ...]

    def __post_init__(self) -> None:
        if not self.experts:
            raise DataError("empty pool")
        seen: set[str] = set()
        for row, e in enumerate(self.experts):
            if not e.id:
                raise DataError(f"pool row {row}: empty expert id")
            if e.id in seen:
                raise DataError(f"pool row {row}: duplicate id '{e.id}'")
            seen.add(e.id)
            if not np.isfinite(e.cost_raw) or e.cost_raw < 0:
                raise DataError(f"pool row {row} ('{e.id}'): negative or non-finite cost {e.cost_raw}")
            if e.kind not in DESCRIPTOR_KINDS:
                raise DataError(f"pool row {row} ('{e.id}'): unknown descriptor kind '{e.kind}'")
        if len(self.experts) >= 2 and len({e.cost_raw for e in self.experts}) < 2:
            # Constant-cost pools are legal (costs normalize to all zero and the
            # partition collapses to one band) but rarely what the user meant.
            warnings.warn("all experts share one cost; routing degrades to pure similarity", stacklevel=2)

    @property
    def M(self) -> int:
        return len(self.experts)

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(e.id for e in self.experts)

    @property
    def costs_raw(self) -> np.ndarray:
        return np.array([e.cost_raw for e in self.experts], dtype=np.float64)

    @property
    def kinds(self) -> tuple[str, ...]:
        return tuple(e.kind for e in self.experts)

    def index_of(self, expert_id: str) -> int:
        try:
            return self.ids.index(expert_id)
        except ValueError:
            raise DataError(f"unknown expert id '{expert_id}'") from None

    def ids_of_kind(self, kind: str) -> tuple[str, ...]:
        return tuple(e.id for e in self.experts if e.kind == kind)


@dataclass(frozen=True)
class QueryRecord:
    """A prompt embedding plus its per-expert quality row, aligned to pool order."""

    query_id: str
    embedding: np.ndarray
    quality: np.ndarray
    split: str


@dataclass(frozen=True)
class LogitProbeTensor:
    """Per-expert next-token probabilities, indexed (expert, probe, step, token)."""

    token_ids: tuple[int, ...]
    probs: np.ndarray
    expert_ids: tuple[str, ...]

    @property
    def n_probes(self) -> int:
        return self.probs.shape[1]

    @property
    def t_steps(self) -> int:
        return self.probs.shape[2]

    @property
    def vocab_size(self) -> int:
        return self.probs.shape[3]


@dataclass(frozen=True)
class PerplexityTable:
    """Per-expert mean negative log-likelihoods (nats/token), indexed (expert, probe)."""

    scores: np.ndarray
    expert_ids: tuple[str, ...]

    @property
    def n_probes(self) -> int:
        return self.scores.shape[1]


# ---------------------------------------------------------------------------
# expert pool
# ---------------------------------------------------------------------------

def load_expert_pool(path: str | Path) -> ExpertPool:
    """Load and validate ``pool.jsonl``; file row order becomes index order."""
    path = Path(path)
    experts: list[Expert] = []
    for row, obj in _iter_jsonl(path, "pool"):
        for key in ("id", "cost", "kind"):
            if key not in obj:
                raise DataError(f"pool line {row}: missing field '{key}'")
        if not isinstance(obj["id"], str):
            raise DataError(f"pool line {row}: field 'id' must be a string")
        try:
            cost = float(obj["cost"])
        except (TypeError, ValueError):
            raise DataError(f"pool line {row}: field 'cost' is not a number") from None
        experts.append(Expert(id=obj["id"], cost_raw=cost, kind=obj["kind"]))
    if not experts:
        raise DataError(f"{path}: empty pool")
    return ExpertPool(experts=tuple(experts))


def write_expert_pool(pool: ExpertPool, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in pool.experts:
            fh.write(json.dumps({"id": e.id, "cost": e.cost_raw, "kind": e.kind}) + "\n")


# ---------------------------------------------------------------------------
# query records
# ---------------------------------------------------------------------------

def load_query_dataset(path: str | Path, pool: ExpertPool) -> list[QueryRecord]:
    """Load ``queries.jsonl``; quality columns are realigned to pool order by id."""
    path = Path(path)
    records: list[QueryRecord] = []
    seen_ids: set[str] = set()
    dim: int | None = None
    for row, obj in _iter_jsonl(path, "queries"):
        for key in ("id", "split", "embedding", "quality"):
            if key not in obj:
                raise DataError(f"queries line {row}: missing field '{key}'")
        qid = obj["id"]
        if not isinstance(qid, str) or not qid:
            raise DataError(f"queries line {row}: field 'id' must be a nonempty string")
        if qid in seen_ids:
            raise DataError(f"queries line {row}: duplicate query id '{qid}'")
        seen_ids.add(qid)
        if obj["split"] not in SPLITS:
            raise DataError(f"queries line {row} ('{qid}'): unknown split '{obj['split']}'")
        emb = np.asarray(obj["embedding"], dtype=np.float64)
        if emb.ndim != 1 or emb.size == 0:
            raise DataError(f"queries line {row} ('{qid}'): embedding must be a nonempty flat list")
        if dim is None:
            dim = emb.size
        elif emb.size != dim:
            raise DataError(
                f"queries line {row} ('{qid}'): embedding length {emb.size} differs from {dim} seen earlier"
            )
        if not np.all(np.isfinite(emb)):
            raise DataError(f"queries line {row} ('{qid}'): non-finite embedding value")
        qmap = obj["quality"]
        if not isinstance(qmap, dict):
            raise DataError(f"queries line {row} ('{qid}'): 'quality' must map expert id to score")
        unknown = sorted(set(qmap) - set(pool.ids))
        if unknown:
            raise DataError(f"queries line {row} ('{qid}'): unknown expert id '{unknown[0]}' in quality")
        quality = np.empty(pool.M, dtype=np.float64)
        for j, eid in enumerate(pool.ids):
            if eid not in qmap:
                raise DataError(f"queries line {row} ('{qid}'): missing quality for expert '{eid}'")
            val = float(qmap[eid])
            if not np.isfinite(val) or val < 0.0 or val > 1.0:
                raise DataError(
                    f"queries line {row} ('{qid}'): quality {val} for expert '{eid}' outside [0, 1]"
                )
            quality[j] = val
        records.append(
            QueryRecord(query_id=qid, embedding=_freeze(emb), quality=_freeze(quality), split=obj["split"])
        )
    if not records:
        raise DataError(f"{path}: empty query file")
    return records


def write_query_dataset(records: list[QueryRecord], pool: ExpertPool, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            obj = {
                "id": r.query_id,
                "split": r.split,
                "embedding": [float(v) for v in r.embedding],
                "quality": {eid: float(r.quality[j]) for j, eid in enumerate(pool.ids)},
            }
            fh.write(json.dumps(obj) + "\n")


def split_matrices(records: list[QueryRecord], split: str) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Stack one split into (ids, embeddings (n, D), quality (n, M))."""
    subset = [r for r in records if r.split == split]
    if not subset:
        raise DataError(f"no records in split '{split}'")
    ids = [r.query_id for r in subset]
    X = np.stack([r.embedding for r in subset])
    Q = np.stack([r.quality for r in subset])
    return ids, X, Q


# ---------------------------------------------------------------------------
# probe data
# ---------------------------------------------------------------------------

def load_probe_data(path: str | Path, pool: ExpertPool, kind: str) -> LogitProbeTensor | PerplexityTable:
    """Load probes for one descriptor kind, realigned to the pool's index order.

    ``path`` may point at the sidecar (``.json``), the payload (``.bin``), or
    the shared stem. The expert axis of the returned structure holds exactly
    the pool experts of ``kind``, in pool order; extra file experts are dropped.
    """
    if kind not in DESCRIPTOR_KINDS:
        raise DataError(f"unknown probe kind '{kind}'")
    sidecar, payload = _probe_paths(path)
    try:
        header = json.loads(sidecar.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{sidecar}: invalid JSON sidecar ({exc})") from None
    for key in ("kind", "expert_ids", "shape", "dtype"):
        if key not in header:
            raise DataError(f"{sidecar}: missing header field '{key}'")
    if header["kind"] != kind:
        raise DataError(f"{sidecar}: header kind '{header['kind']}' does not match requested '{kind}'")
    if header["dtype"] not in _PROBE_DTYPES:
        raise DataError(f"{sidecar}: unsupported dtype '{header['dtype']}'")
    dtype = _PROBE_DTYPES[header["dtype"]]
    shape = tuple(int(s) for s in header["shape"])
    file_ids = list(header["expert_ids"])
    if len(file_ids) != len(set(file_ids)):
        raise DataError(f"{sidecar}: duplicate expert id in header")
    if shape[0] != len(file_ids):
        raise DataError(f"{sidecar}: shape[0]={shape[0]} does not match {len(file_ids)} expert ids")
    expected_ndim = 4 if kind == "logit" else 2
    if len(shape) != expected_ndim:
        raise DataError(f"{sidecar}: {kind} probes need {expected_ndim} axes, header has {len(shape)}")

    raw = np.fromfile(payload, dtype=dtype)
    if raw.size != int(np.prod(shape)):
        raise DataError(f"{payload}: payload holds {raw.size} values, header shape implies {np.prod(shape)}")
    data = raw.reshape(shape)

    wanted = pool.ids_of_kind(kind)
    if not wanted:
        raise DataError(f"pool has no experts of kind '{kind}'")
    missing = [eid for eid in wanted if eid not in file_ids]
    if missing:
        raise DataError(f"{sidecar}: missing expert '{missing[0]}' required by the pool")
    rows = [file_ids.index(eid) for eid in wanted]
    data = np.ascontiguousarray(data[rows])

    if kind == "logit":
        if "token_ids" not in header:
            raise DataError(f"{sidecar}: logit probes need a 'token_ids' header field")
        token_ids = [int(t) for t in header["token_ids"]]
        if len(token_ids) != len(set(token_ids)):
            raise DataError(f"{sidecar}: duplicate token id in header")
        if len(token_ids) != shape[3]:
            raise DataError(f"{sidecar}: {len(token_ids)} token ids but token axis has size {shape[3]}")
        if np.any(data < 0.0) or np.any(data > 1.0):
            raise DataError(f"{payload}: probability outside [0, 1]")
        # Values are a top slice of a distribution: per-(expert, probe, step)
        # mass may not exceed 1 (small tolerance for f32 rounding).
        mass = data.astype(np.float64).sum(axis=3)
        if np.any(mass > 1.0 + 1e-5):
            bad = np.unravel_index(int(np.argmax(mass)), mass.shape)
            raise DataError(f"{payload}: token mass {mass[bad]:.6f} > 1 at (expert, probe, step)={bad}")
        return LogitProbeTensor(token_ids=tuple(token_ids), probs=_freeze(data), expert_ids=wanted)

    if not np.all(np.isfinite(data)):
        raise DataError(f"{payload}: non-finite perplexity score")
    if np.any(data < 0.0):
        raise DataError(f"{payload}: negative perplexity score")
    return PerplexityTable(scores=_freeze(data), expert_ids=wanted)


def write_probe_data(
    path: str | Path,
    kind: str,
    expert_ids: list[str] | tuple[str, ...],
    data: np.ndarray,
    token_ids: list[int] | tuple[int, ...] | None = None,
    dtype: str = "f32",
) -> None:
    """Write a probe payload and its sidecar header next to ``path``'s stem."""
    if kind not in DESCRIPTOR_KINDS:
        raise DataError(f"unknown probe kind '{kind}'")
    if dtype not in _PROBE_DTYPES:
        raise DataError(f"unsupported dtype '{dtype}'")
    sidecar, payload = _probe_paths(path)
    header: dict = {
        "kind": kind,
        "expert_ids": list(expert_ids),
        "shape": [int(s) for s in data.shape],
        "dtype": dtype,
    }
    if kind == "logit":
        if token_ids is None:
            raise DataError("logit probes need token_ids")
        header["token_ids"] = [int(t) for t in token_ids]
    sidecar.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    np.ascontiguousarray(data, dtype=_PROBE_DTYPES[dtype]).tofile(payload)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _iter_jsonl(path: Path, what: str):
    if not path.exists():
        raise DataError(f"{what} file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        for row, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{what} line {row}: invalid JSON ({exc})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{what} line {row}: expected a JSON object")
            yield row, obj


def _probe_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        return path, path.with_suffix(".bin")
    if path.suffix == ".bin":
        return path.with_suffix(".json"), path
    return path.with_suffix(".json"), path.with_suffix(".bin")
