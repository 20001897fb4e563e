"""Full model: preprocessing, interleaved layers, prediction head, checkpoints.

Parameter layout (all 2-D, names are checkpoint keys)::

    embed.*          embedding tables and the dense projector
    masknet.*        multi-sequence fusion
    cls.*            summariser producing the CLS block (non-sole modes)
    layer{l}.inter   interaction arch
    layer{l}.seq     sequence arch (non-sole modes)
    layer{l}.xsum    non-sequence summary handed to the sequence arch
    layer{l}.ssum    sequence summary handed to the interaction arch
    final.xsum/ssum  summaries of the last layer's outputs, read by the head
    head.*           classifier MLP

Every non-sole mode builds the same parameter set; the modes differ only in
which cross-arch summaries are real and which are constant zeros.
"""

from __future__ import annotations

import io
import struct
import zlib
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig, dump_kv, parse_kv
from .cross import init_nonseq_summary, init_seq_summary, summarize_nonseq, summarize_seq
from .errors import AssemblyError, CorruptionError, VersionError
from .features import Dataset, FeatureBatch, FeatureSchema, embed_batch, init_embeddings, init_mask_net, mask_net
from .interaction import init_interaction_layer, interaction_arch_layer, interaction_param_count
from .layers import ParamStore, init_mlp, mlp, mlp_param_count
from .sequence import init_sequence_layer, prepend_cls, sequence_arch_layer, sequence_param_count

PROB_EPS = 1e-7


def _check_compatible(cfg: ModelConfig, schema: FeatureSchema) -> None:
    if cfg.dim != schema.dim:
        raise AssemblyError(f"model dim {cfg.dim} != schema embedding dim {schema.dim}")
    if schema.n_seq < 1:
        raise AssemblyError("the model needs at least one sequence feature")
    n_cols = schema.n_columns + (1 if cfg.mode == "sole" else 0)
    if cfg.n_sum >= n_cols:
        raise AssemblyError(f"n_sum={cfg.n_sum} must be smaller than the {n_cols} non-sequence columns")
    if cfg.has_sequence_arch and cfg.n_cls >= schema.n_columns:
        raise AssemblyError(f"n_cls={cfg.n_cls} must be smaller than the {schema.n_columns} non-sequence columns")
    schema.seq_len  # raises on unequal sequence lengths


def _n_cols(cfg: ModelConfig, schema: FeatureSchema) -> int:
    return schema.n_columns + (1 if cfg.mode == "sole" else 0)


def init_params(cfg: ModelConfig, schema: FeatureSchema, seed: int) -> ParamStore:
    _check_compatible(cfg, schema)
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = cfg.dim
    init_embeddings(store.scope("embed"), schema, rng)
    init_mask_net(store.scope("masknet"), schema.n_seq, d, rng, cfg.mask_hidden)
    n_cols = _n_cols(cfg, schema)
    c_s = 0 if cfg.mode == "sole" else cfg.n_seq_summary
    if cfg.has_sequence_arch and cfg.n_cls:
        init_nonseq_summary(store.scope("cls"), d, n_cols, cfg.n_cls, rng)
    for l in range(cfg.n_layers):
        init_interaction_layer(store.scope(f"layer{l}.inter"), cfg, n_cols, c_s, rng)
        if cfg.has_sequence_arch:
            init_sequence_layer(store.scope(f"layer{l}.seq"), cfg, rng)
            init_nonseq_summary(store.scope(f"layer{l}.xsum"), d, n_cols, cfg.n_sum, rng)
            init_seq_summary(store.scope(f"layer{l}.ssum"), cfg, rng)
    init_nonseq_summary(store.scope("final.xsum"), d, n_cols, cfg.n_sum, rng)
    if cfg.has_sequence_arch:
        init_seq_summary(store.scope("final.ssum"), cfg, rng)
    init_mlp(store, "head", [head_input_width(cfg)] + list(cfg.head_sizes) + [1], rng)
    return store


def head_input_width(cfg: ModelConfig) -> int:
    n = cfg.n_sum + (cfg.n_seq_summary if cfg.has_sequence_arch else 0)
    return cfg.dim * n


def param_count(cfg: ModelConfig, schema: FeatureSchema) -> int:
    """Closed-form parameter count; must equal ``init_params(...).count()``."""
    d = cfg.dim
    k = schema.n_seq
    kd = k * d
    h = cfg.mask_hidden or kd
    n = d * schema.dense_count + d * sum(s.vocab for s in schema.sparse) + d * sum(s.vocab for s in schema.sequences)
    n += h * kd + h + kd * h + kd + d * kd + d
    n_cols = _n_cols(cfg, schema)

    def xsum(n_out):
        D = d * n_out
        return n_cols * n_out + D * D + D

    def ssum():
        D = d * cfg.n_seq_summary
        pma = cfg.n_pma * d + 3 * cfg.heads * d * cfg.d_k + cfg.heads * cfg.d_k * d if cfg.n_pma else 0
        return pma + D * D + D

    c_s = 0 if cfg.mode == "sole" else cfg.n_seq_summary
    if cfg.has_sequence_arch and cfg.n_cls:
        n += xsum(cfg.n_cls)
    per_layer = interaction_param_count(cfg, n_cols, c_s)
    if cfg.has_sequence_arch:
        per_layer += sequence_param_count(cfg) + xsum(cfg.n_sum) + ssum()
    n += cfg.n_layers * per_layer
    n += xsum(cfg.n_sum) + (ssum() if cfg.has_sequence_arch else 0)
    n += mlp_param_count([head_input_width(cfg)] + list(cfg.head_sizes) + [1])
    return n


def _zeros(B: int, d: int, n: int) -> Tensor:
    return Tensor(np.zeros((B, d, n)))


def masked_mean_tokens(S: Tensor, seq_len: np.ndarray) -> Tensor:
    """Average of the valid (rightmost ``seq_len``) columns; zero for empty sequences."""
    B, d, T = S.shape
    valid = np.arange(T)[None, :] >= (T - seq_len[:, None])
    w = valid / np.maximum(seq_len, 1)[:, None]
    return S @ Tensor(w.reshape(B, T, 1))


def interformer_forward(batch: FeatureBatch, params: ParamStore, cfg: ModelConfig, trace: Optional[dict] = None) -> Tensor:
    """Logits ``(B, 1)`` for an embedded batch.

    ``trace``, when given, collects the intermediate summaries by name.
    """
    B = batch.size
    d = cfg.dim
    sig = cfg.gate_sigma
    act = cfg.activation
    X = batch.X
    S = mask_net(batch.seqs, params.scope("masknet"), act)
    T = S.cols
    if trace is not None:
        trace["X1"], trace["S1"] = X, S

    if cfg.mode == "sole":
        X = ag.concat([X, masked_mean_tokens(S, batch.seq_len)], axis=-1)
        for l in range(cfg.n_layers):
            X = interaction_arch_layer(X, None, params.scope(f"layer{l}.inter"), cfg)
        x_sum = summarize_nonseq(X, params.scope("final.xsum"), sig)
        if trace is not None:
            trace["x_sum_final"] = x_sum
        return predict_logit(x_sum, None, params.scope("head"), act)

    n2s, s2n = cfg.nonseq_to_seq, cfg.seq_to_nonseq
    if cfg.n_cls and n2s:
        cls = summarize_nonseq(X, params.scope("cls"), sig)
    else:
        cls = _zeros(B, d, cfg.n_cls)
    S = prepend_cls(cls, S)
    pad_mask = batch.pad_mask(T, cfg.n_cls)
    positions = np.arange(cfg.n_cls + T)
    for l in range(cfg.n_layers):
        x_sum = summarize_nonseq(X, params.scope(f"layer{l}.xsum"), sig) if n2s else _zeros(B, d, cfg.n_sum)
        if s2n:
            s_sum = summarize_seq(S, cfg.n_cls, cfg.n_pma, cfg.n_recent, params.scope(f"layer{l}.ssum"),
                                  pad_mask, batch.seq_len, sig)
        else:
            s_sum = _zeros(B, d, cfg.n_seq_summary)
        if trace is not None:
            trace[f"x_sum{l}"], trace[f"s_sum{l}"] = x_sum, s_sum
        X_next = interaction_arch_layer(X, s_sum, params.scope(f"layer{l}.inter"), cfg)
        S = sequence_arch_layer(S, x_sum, params.scope(f"layer{l}.seq"), pad_mask, positions, act, cfg.ln_eps)
        X = X_next
    x_sum = summarize_nonseq(X, params.scope("final.xsum"), sig)
    s_sum = summarize_seq(S, cfg.n_cls, cfg.n_pma, cfg.n_recent, params.scope("final.ssum"),
                          pad_mask, batch.seq_len, sig)
    if trace is not None:
        trace["x_sum_final"], trace["s_sum_final"] = x_sum, s_sum
    return predict_logit(x_sum, s_sum, params.scope("head"), act)


def predict_logit(x_sum: Tensor, s_sum: Optional[Tensor], head: ParamStore, act: str = "swish") -> Tensor:
    parts = [ag.flatten(x_sum)]
    if s_sum is not None:
        parts.append(ag.flatten(s_sum))
    return mlp(ag.concat(parts, axis=-1), head, act=act)


def to_probability(logit: Tensor) -> Tensor:
    return ag.clip(ag.activation(logit, "sigmoid"), PROB_EPS, 1.0 - PROB_EPS)


def predict_head(x_sum: Tensor, s_sum: Optional[Tensor], head: ParamStore, act: str = "swish") -> Tensor:
    """CTR probability ``(B, 1)`` from the final summaries, clamped away from 0 and 1."""
    return to_probability(predict_logit(x_sum, s_sum, head, act))


class InterFormer:
    """Config, schema and parameters bundled for convenience."""

    def __init__(self, cfg: ModelConfig, schema: FeatureSchema, seed: int = 0, params: Optional[ParamStore] = None):
        _check_compatible(cfg, schema)
        self.cfg = cfg
        self.schema = schema
        self.params = params if params is not None else init_params(cfg, schema, seed)

    def embed(self, raw: Dataset) -> FeatureBatch:
        return embed_batch(self.schema, raw, self.params.scope("embed"))

    def logits(self, raw: Dataset, trace: Optional[dict] = None) -> Tensor:
        return interformer_forward(self.embed(raw), self.params, self.cfg, trace)

    def probabilities(self, raw: Dataset) -> Tensor:
        return to_probability(self.logits(raw))

    def predict(self, raw: Dataset, batch_size: int = 1024) -> np.ndarray:
        out = []
        for start in range(0, len(raw), batch_size):
            out.append(self.probabilities(raw.subset(np.arange(start, min(start + batch_size, len(raw))))).data[:, 0])
        return np.concatenate(out) if out else np.zeros(0)

    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path, expected: Optional[ModelConfig] = None) -> "InterFormer":
        return load_checkpoint(path, expected)


# ---------------------------------------------------------------------------
# checkpoint container:
#   b"IFCK" | u32 version | u32 len | config text | u32 count |
#   count x (u32 len | name | u32 rows | u32 cols | rows*cols float64 LE) | u32 crc32

MAGIC = b"IFCK"
VERSION = 1


def _config_text(model: InterFormer) -> str:
    d = {f"model.{k}": v for k, v in model.cfg.to_dict().items()}
    d.update({f"schema.{k}": v for k, v in model.schema.to_dict().items()})
    return dump_kv(d)


def checkpoint_bytes(model: InterFormer) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = _config_text(model).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    items = model.params.items()
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        r, c = t.shape
        buf.write(struct.pack("<II", r, c))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(path, model: InterFormer) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model))


def parse_checkpoint(blob: bytes, expected: Optional[ModelConfig] = None) -> InterFormer:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptionError("not an IFCK checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptionError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    try:
        off = 8
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        kv = parse_kv(body[off:off + n].decode("utf-8"))
        off += n
        cfg = ModelConfig.from_dict({k[6:]: v for k, v in kv.items() if k.startswith("model.")})
        schema = FeatureSchema.from_dict({k[7:]: v for k, v in kv.items() if k.startswith("schema.")})
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        records = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + ln].decode("utf-8")
            off += ln
            r, c = struct.unpack_from("<II", body, off)
            off += 8
            arr = np.frombuffer(body, dtype="<f8", count=r * c, offset=off).reshape(r, c).astype(np.float64)
            off += 8 * r * c
            records.append((name, arr))
        if off != len(body):
            raise CorruptionError("trailing bytes after tensor records")
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CorruptionError(f"malformed checkpoint: {exc}") from None
    target_cfg = expected if expected is not None else cfg
    model = InterFormer(target_cfg, schema, seed=0)
    names = model.params.names()
    for i, (name, arr) in enumerate(records):
        if i >= len(names) or names[i] != name:
            want = names[i] if i < len(names) else "<none>"
            raise AssemblyError(f"tensor {name!r} does not match expected {want!r}")
        t = model.params[name]
        if t.shape != arr.shape:
            raise AssemblyError(f"tensor {name!r}: checkpoint shape {arr.shape}, model expects {t.shape}")
        t.data = arr
    if len(records) != len(names):
        raise AssemblyError(f"tensor {names[len(records)]!r} missing from checkpoint")
    return model


def load_checkpoint(path, expected: Optional[ModelConfig] = None) -> InterFormer:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), expected)
