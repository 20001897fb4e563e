"""Feature schema, datasets, embedding and multi-sequence fusion.

Per example, non-sequence features become a ``d x (1 + n)`` matrix whose first
column is the projected dense block and whose remaining columns are sparse
embeddings in schema order. Each behaviour sequence becomes ``d x T`` with
left padding, so the most recent token is always the rightmost column.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DataError, DimensionError, IngestionError, ParseError, SchemaError
from .layers import ParamStore


@dataclass(frozen=True)
class SparseSpec:
    name: str
    vocab: int


@dataclass(frozen=True)
class SeqSpec:
    name: str
    vocab: int
    max_len: int


@dataclass(frozen=True)
class FeatureSchema:
    dense_count: int
    sparse: Tuple[SparseSpec, ...]
    sequences: Tuple[SeqSpec, ...]
    dim: int

    def __post_init__(self):
        if self.dense_count < 0:
            raise SchemaError("dense_count must be >= 0")
        if self.dim < 1:
            raise SchemaError("embedding dim must be >= 1")
        for s in self.sparse:
            if s.vocab < 1:
                raise SchemaError(f"sparse feature {s.name!r} needs vocab >= 1")
        for s in self.sequences:
            if s.vocab < 1 or s.max_len < 1:
                raise SchemaError(f"sequence {s.name!r} needs vocab >= 1 and max_len >= 1")
        names = [s.name for s in self.sparse] + [s.name for s in self.sequences]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")

    @property
    def n_sparse(self) -> int:
        return len(self.sparse)

    @property
    def n_seq(self) -> int:
        return len(self.sequences)

    @property
    def n_columns(self) -> int:
        """Columns of the non-sequence matrix: dense block plus one per sparse feature."""
        return 1 + self.n_sparse

    @property
    def seq_len(self) -> int:
        lens = {s.max_len for s in self.sequences}
        if len(lens) > 1:
            raise SchemaError(f"sequences must share one length, got {sorted(lens)}")
        return lens.pop() if lens else 0

    def csv_header(self) -> List[str]:
        return (
            ["label", "user_id"]
            + [f"dense_{i}" for i in range(self.dense_count)]
            + [f"sparse_{s.name}" for s in self.sparse]
            + [f"seq_{s.name}" for s in self.sequences]
            + ["split"]
        )

    def to_dict(self) -> dict:
        return {
            "dense_count": self.dense_count,
            "dim": self.dim,
            "sparse": ";".join(f"{s.name}:{s.vocab}" for s in self.sparse),
            "sequences": ";".join(f"{s.name}:{s.vocab}:{s.max_len}" for s in self.sequences),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        sparse = tuple(
            SparseSpec(n, int(v)) for n, v in (item.split(":") for item in str(d["sparse"]).split(";") if item)
        )
        seqs = tuple(
            SeqSpec(n, int(v), int(t))
            for n, v, t in (item.split(":") for item in str(d["sequences"]).split(";") if item)
        )
        return cls(int(d["dense_count"]), sparse, seqs, int(d["dim"]))


@dataclass
class Dataset:
    """Raw records as parallel arrays. Sequences are left-padded with index 0."""

    schema: FeatureSchema
    label: np.ndarray  # (N,) int64 in {0, 1}
    user_id: np.ndarray  # (N,) int64
    dense: np.ndarray  # (N, m) float64
    sparse: np.ndarray  # (N, n) int64
    seqs: np.ndarray  # (N, k, T) int64
    seq_lens: np.ndarray  # (N, k) int64
    is_train: np.ndarray  # (N,) bool
    malformed: List[Tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.label.shape[0])

    @property
    def seq_len(self) -> np.ndarray:
        """Valid length per example: the longest of its sequences."""
        if self.seqs.shape[1] == 0:
            return np.zeros(len(self), dtype=np.int64)
        return self.seq_lens.max(axis=1)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(
            self,
            label=self.label[idx],
            user_id=self.user_id[idx],
            dense=self.dense[idx],
            sparse=self.sparse[idx],
            seqs=self.seqs[idx],
            seq_lens=self.seq_lens[idx],
            is_train=self.is_train[idx],
            malformed=[],
        )

    def train(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.is_train))

    def test(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.is_train))

    @property
    def background_ctr(self) -> float:
        """Mean training label."""
        tr = self.label[self.is_train]
        if tr.size == 0:
            raise DataError("no training examples")
        return float(tr.mean())

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.label, self.user_id, self.dense, self.sparse, self.seqs, self.seq_lens, self.is_train):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.schema.to_dict()).encode())
        return h.hexdigest()

    def equals(self, other: "Dataset") -> bool:
        return self.schema == other.schema and self.digest() == other.digest()


@dataclass
class FeatureBatch:
    """One embedded minibatch. ``X`` is ``(B, d, 1+n)``; each entry of ``seqs``
    is ``(B, d, T)`` and is fused into the unified sequence by ``mask_net``."""

    X: Tensor
    seqs: List[Tensor]
    seq_len: np.ndarray
    label: np.ndarray
    user_id: np.ndarray

    @property
    def size(self) -> int:
        return int(self.label.shape[0])

    def pad_mask(self, T: int, n_prefix: int = 0) -> np.ndarray:
        """Valid-position mask ``(B, n_prefix + T)``; prefix (CLS) slots always valid."""
        pos = np.arange(T)[None, :]
        valid = pos >= (T - self.seq_len[:, None])
        return np.concatenate([np.ones((self.size, n_prefix), dtype=bool), valid], axis=1)


# ---------------------------------------------------------------------------
# embedding


def init_embeddings(store: ParamStore, schema: FeatureSchema, rng: np.random.Generator) -> None:
    d = schema.dim
    lim = 1.0 / math.sqrt(d)
    store.add("dense", rng.uniform(-lim, lim, size=(d, schema.dense_count)))
    for s in schema.sparse:
        store.add(f"sparse_{s.name}", rng.uniform(-lim, lim, size=(s.vocab, d)))
    for s in schema.sequences:
        store.add(f"seq_{s.name}", rng.uniform(-lim, lim, size=(s.vocab, d)))


def embed_batch(schema: FeatureSchema, raw: Dataset, tables: ParamStore) -> FeatureBatch:
    """Build ``X = [W_dense x_dense | e_sparse_1 | ... | e_sparse_n]`` and the
    raw sequence embeddings for every example of ``raw``."""
    B = len(raw)
    if raw.dense.shape[1] != schema.dense_count:
        raise SchemaError(f"expected {schema.dense_count} dense values, got {raw.dense.shape[1]}")
    for j, s in enumerate(schema.sparse):
        col = raw.sparse[:, j]
        bad = (col < 0) | (col >= s.vocab)
        if bad.any():
            raise IngestionError(f"feature {s.name!r}: index {int(col[bad][0])} outside vocab {s.vocab}")
    dense_in = Tensor(raw.dense.reshape(B, schema.dense_count, 1))
    cols = [tables["dense"] @ dense_in]
    for j, s in enumerate(schema.sparse):
        e = ag.take_rows(tables[f"sparse_{s.name}"], raw.sparse[:, j])
        cols.append(ag.reshape(e, (B, schema.dim, 1)))
    X = ag.concat(cols, axis=-1)
    seqs = []
    for j, s in enumerate(schema.sequences):
        idx = raw.seqs[:, j, :]
        bad = (idx < 0) | (idx >= s.vocab)
        if bad.any():
            raise IngestionError(f"sequence {s.name!r}: index {int(idx[bad][0])} outside vocab {s.vocab}")
        seqs.append(ag.transpose(ag.take_rows(tables[f"seq_{s.name}"], idx)))
    return FeatureBatch(X, seqs, raw.seq_len.copy(), raw.label.copy(), raw.user_id.copy())


# ---------------------------------------------------------------------------
# MaskNet


def init_mask_net(store: ParamStore, k: int, d: int, rng, hidden: Optional[int] = None) -> None:
    kd = k * d
    h = hidden or kd
    lim1, lim2 = math.sqrt(6.0 / (kd + h)), math.sqrt(6.0 / (h + kd))
    store.add("mask_w1", rng.uniform(-lim1, lim1, size=(h, kd)))
    store.add("mask_b1", np.zeros((h, 1)))
    store.add("mask_w2", rng.uniform(-lim2, lim2, size=(kd, h)))
    store.add("mask_b2", np.zeros((kd, 1)))
    if k == 1:
        store.add("lce_w", np.eye(d))
    else:
        lim = math.sqrt(6.0 / (kd + d))
        store.add("lce_w", rng.uniform(-lim, lim, size=(d, kd)))
    store.add("lce_b", np.zeros((d, 1)))


def mask_net(sequences: Sequence[Tensor], p: ParamStore, act: str = "swish") -> Tensor:
    """``lce(S * mask(S))`` on the row-stacked ``kd x T`` sequence block.

    The mask MLP acts on each time step independently and ends in a sigmoid;
    the combiner is linear and maps ``kd`` rows down to ``d``.
    """
    if not sequences:
        raise DimensionError("mask_net needs at least one sequence")
    T = sequences[0].cols
    for s in sequences:
        if s.cols != T:
            raise DimensionError(f"mask_net: sequences have different lengths ({T} vs {s.cols})")
    S = ag.concat(list(sequences), axis=-2)
    h = ag.activation(ag.bias_add(p["mask_w1"] @ S, p["mask_b1"]), act)
    m = ag.activation(ag.bias_add(p["mask_w2"] @ h, p["mask_b2"]), "sigmoid")
    return ag.bias_add(p["lce_w"] @ (S * m), p["lce_b"])


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class GenConfig:
    """Synthetic CTR task mixing a linear non-sequence score with a recency
    match between the target category and the behaviour history."""

    n_examples: int = 10000
    dense_count: int = 3
    n_users: int = 100
    n_categories: int = 20
    extra_sparse: Tuple[int, ...] = (10, 10)
    n_brands: int = 30
    seq_len: int = 20
    min_seq_len: int = 1
    dim: int = 8
    ns_weight: float = 1.5
    seq_weight: float = 1.5
    recent_window: int = 3
    recent_decay: float = 0.7
    p_target_from_recent: float = 0.5
    ctr: float = 0.3
    test_fraction: float = 0.15

    def schema(self) -> FeatureSchema:
        sparse = [SparseSpec("user", self.n_users), SparseSpec("item_cat", self.n_categories)]
        sparse += [SparseSpec(f"f{i}", v) for i, v in enumerate(self.extra_sparse)]
        seqs = (SeqSpec("hist_cat", self.n_categories, self.seq_len), SeqSpec("hist_brand", self.n_brands, self.seq_len))
        return FeatureSchema(self.dense_count, tuple(sparse), seqs, self.dim)


def _standardize(v: np.ndarray) -> np.ndarray:
    sd = v.std()
    return (v - v.mean()) / sd if sd > 0 else v - v.mean()


def _calibrate_bias(score: np.ndarray, target: float) -> float:
    lo, hi = -30.0, 30.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if (1.0 / (1.0 + np.exp(-(score + mid)))).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(cfg: GenConfig, seed: int) -> Dataset:
    if cfg.ns_weight == 0 and cfg.seq_weight == 0:
        raise ConfigError("at least one of ns_weight/seq_weight must be non-zero")
    if not 0.0 < cfg.ctr < 1.0:
        raise ConfigError("ctr must lie in (0, 1)")
    if not 1 <= cfg.min_seq_len <= cfg.seq_len:
        raise ConfigError("need 1 <= min_seq_len <= seq_len")
    if cfg.n_examples < 2:
        raise ConfigError("n_examples must be >= 2")
    schema = cfg.schema()
    rng = np.random.default_rng(seed)
    N, T, C = cfg.n_examples, cfg.seq_len, cfg.n_categories

    user = rng.integers(0, cfg.n_users, size=N)
    dense = rng.normal(size=(N, cfg.dense_count))
    extras = [rng.integers(0, v, size=N) for v in cfg.extra_sparse]

    lens = rng.integers(cfg.min_seq_len, T + 1, size=N)
    hist = rng.integers(0, C, size=(N, T))
    pos = np.arange(T)[None, :]
    valid = pos >= (T - lens[:, None])
    hist = np.where(valid, hist, 0)
    brand_map = rng.integers(0, cfg.n_brands, size=C)
    noisy = rng.random((N, T)) < 0.2
    brands = np.where(noisy, rng.integers(0, cfg.n_brands, size=(N, T)), brand_map[hist])
    brands = np.where(valid, brands, 0)

    # target category: half the time one of the few most recent items
    window = np.minimum(cfg.recent_window, lens)
    pick = T - 1 - (rng.random(N) * window).astype(np.int64)
    from_recent = rng.random(N) < cfg.p_target_from_recent
    target = np.where(from_recent, hist[np.arange(N), pick], rng.integers(0, C, size=N))

    w_dense = rng.normal(size=cfg.dense_count)
    ns = dense @ w_dense
    ns = ns + rng.normal(size=cfg.n_users)[user]
    for e, v in zip(extras, cfg.extra_sparse):
        ns = ns + rng.normal(size=v)[e]
    match = np.zeros(N)
    for j in range(cfg.recent_window):
        col = T - 1 - j
        hit = (hist[:, col] == target) & valid[:, col]
        match += (cfg.recent_decay ** j) * hit
    logit = cfg.ns_weight * _standardize(ns) + cfg.seq_weight * _standardize(match)
    logit = logit + _calibrate_bias(logit, cfg.ctr)
    label = (rng.random(N) < 1.0 / (1.0 + np.exp(-logit))).astype(np.int64)

    is_train = np.ones(N, dtype=bool)
    n_test = max(1, int(round(N * cfg.test_fraction)))
    is_train[rng.permutation(N)[:n_test]] = False

    sparse = np.stack([user, target] + extras, axis=1).astype(np.int64)
    seqs = np.stack([hist, brands], axis=1).astype(np.int64)
    seq_lens = np.stack([lens, lens], axis=1).astype(np.int64)
    return Dataset(schema, label, user.astype(np.int64), dense, sparse, seqs, seq_lens, is_train)


# ---------------------------------------------------------------------------
# CSV


def _fmt_float(v: float) -> str:
    return repr(float(v))


def save_csv(ds: Dataset, path) -> None:
    schema = ds.schema
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.csv_header())
        T = ds.seqs.shape[2] if ds.seqs.ndim == 3 else 0
        for i in range(len(ds)):
            row = [str(int(ds.label[i])), str(int(ds.user_id[i]))]
            row += [_fmt_float(v) for v in ds.dense[i]]
            row += [str(int(v)) for v in ds.sparse[i]]
            for j in range(schema.n_seq):
                n = int(ds.seq_lens[i, j])
                row.append("|".join(str(int(v)) for v in ds.seqs[i, j, T - n:]) if n else "")
            row.append("train" if ds.is_train[i] else "test")
            w.writerow(row)


def _parse_int(cell: str, what: str, line: int) -> int:
    try:
        return int(cell)
    except ValueError:
        raise ParseError(f"{what}: {cell!r} is not an integer", line) from None


def load_csv(path, schema: FeatureSchema, strict: bool = False) -> Dataset:
    """Read a dataset written in the ``save_csv`` layout.

    Sequence cells hold ``|``-joined indices oldest first; only the ``T`` most
    recent are kept. Bad rows raise in ``strict`` mode, otherwise they are
    skipped and listed in ``Dataset.malformed`` as ``(line, reason)``.
    The ``split`` column is optional; rows without it are training rows.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty file: missing header") from None
    expected = schema.csv_header()
    required = expected[:-1]
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"missing column(s): {', '.join(missing)}")
    col = {name: header.index(name) for name in required}
    split_col = header.index("split") if "split" in header else None
    T = schema.seq_len

    labels, users, denses, sparses, seqs, lens, train, malformed = [], [], [], [], [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} cells, got {len(row)}", lineno)
            lab = _parse_int(row[col["label"]], "label", lineno)
            if lab not in (0, 1):
                raise ParseError(f"label {lab} not in {{0, 1}}", lineno)
            uid = _parse_int(row[col["user_id"]], "user_id", lineno)
            dv = []
            for i in range(schema.dense_count):
                cell = row[col[f"dense_{i}"]]
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"dense_{i}: {cell!r} is not numeric", lineno) from None
                if not math.isfinite(v):
                    raise ParseError(f"dense_{i}: non-finite value", lineno)
                dv.append(v)
            sv = []
            for s in schema.sparse:
                v = _parse_int(row[col[f"sparse_{s.name}"]], f"sparse_{s.name}", lineno)
                if not 0 <= v < s.vocab:
                    raise IngestionError(f"line {lineno}: feature {s.name!r} index {v} outside vocab {s.vocab}")
                sv.append(v)
            qv, ql = [], []
            for s in schema.sequences:
                cell = row[col[f"seq_{s.name}"]].strip()
                items = [_parse_int(t, f"seq_{s.name}", lineno) for t in cell.split("|")] if cell else []
                for v in items:
                    if not 0 <= v < s.vocab:
                        raise IngestionError(f"line {lineno}: sequence {s.name!r} index {v} outside vocab {s.vocab}")
                items = items[-T:]
                qv.append([0] * (T - len(items)) + items)
                ql.append(len(items))
            tag = row[split_col].strip() if split_col is not None else "train"
            if tag not in ("train", "test"):
                raise ParseError(f"split {tag!r} is not train/test", lineno)
        except (ParseError, IngestionError) as exc:
            if strict:
                raise
            malformed.append((lineno, str(exc)))
            continue
        labels.append(lab)
        users.append(uid)
        denses.append(dv)
        sparses.append(sv)
        seqs.append(qv)
        lens.append(ql)
        train.append(tag == "train")

    n = len(labels)
    return Dataset(
        schema,
        np.array(labels, dtype=np.int64),
        np.array(users, dtype=np.int64),
        np.array(denses, dtype=np.float64).reshape(n, schema.dense_count),
        np.array(sparses, dtype=np.int64).reshape(n, schema.n_sparse),
        np.array(seqs, dtype=np.int64).reshape(n, schema.n_seq, T),
        np.array(lens, dtype=np.int64).reshape(n, schema.n_seq),
        np.array(train, dtype=bool),
        malformed,
    )
