"""Selection and summarisation of what each arch hands to the other."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .layers import ParamStore, glorot, init_linear, linear
from .sequence import init_attention, pma


def init_gating(p: ParamStore, d: int, n_cols: int, rng) -> None:
    # zero weights and unit bias: the gate starts as the identity map
    init_linear(p, "gate", d * n_cols, d * n_cols, rng, zero=True, bias_value=1.0)


def self_gating(X: Tensor, p: ParamStore, sigma: str = "identity") -> Tensor:
    """``sigma(X * MLP(X))`` where the MLP maps the flattened matrix to itself."""
    g = linear(ag.flatten(X), p.scope("gate"))
    return ag.activation(X * ag.reshape(g, X.shape), sigma)


def lce(X: Tensor, W: Tensor) -> Tensor:
    """Compress ``N`` feature columns to ``M <= N`` by learned mixing ``X W``."""
    if W.cols > W.rows:
        raise ConfigError(f"LCE must compress: {W.rows} columns cannot expand to {W.cols}")
    if X.cols != W.rows:
        raise DimensionError(f"LCE: X has {X.cols} columns, W expects {W.rows}")
    return X @ W


def init_nonseq_summary(p: ParamStore, d: int, n_cols: int, n_out: int, rng) -> None:
    if n_out >= n_cols:
        raise ConfigError(f"summary size {n_out} must be smaller than the {n_cols} input columns")
    p.add("lce", glorot(rng, n_cols, n_out))
    init_gating(p, d, n_out, rng)


def summarize_nonseq(X: Tensor, p: ParamStore, sigma: str = "identity") -> Tensor:
    """``Gating(LCE(X))``: ``d x N`` down to ``d x n_sum``."""
    W = p["lce"]
    if W.cols >= X.cols:
        raise ConfigError(f"summary size {W.cols} must be smaller than the {X.cols} input columns")
    return self_gating(lce(X, W), p, sigma)


def init_seq_summary(p: ParamStore, cfg: ModelConfig, rng) -> None:
    d = cfg.dim
    if cfg.n_pma:
        p.add("pma_seeds", rng.normal(scale=1.0 / np.sqrt(d), size=(cfg.n_pma, d)))
        init_attention(p.scope("pma"), d, cfg.heads, cfg.d_k, rng)
    init_gating(p, d, cfg.n_seq_summary, rng)


def recent_tokens(S: Tensor, n_cls: int, k: int, seq_len: np.ndarray) -> Tensor:
    """The ``k`` rightmost valid sequence columns; slots beyond the valid length
    (short sequences) are zero columns."""
    T = S.cols - n_cls
    take = min(k, T)
    block = ag.slice_cols(S, S.cols - take, S.cols)
    slot = np.arange(take)[None, :]
    keep = (slot >= take - np.asarray(seq_len)[:, None]).astype(np.float64)
    block = block * Tensor(np.broadcast_to(keep[:, None, :], block.shape))
    if take < k:
        block = ag.concat([Tensor(np.zeros(block.shape[:-1] + (k - take,))), block], axis=-1)
    return block


def summarize_seq(S: Tensor, n_cls: int, n_pma: int, n_recent: int, p: ParamStore, pad_mask: np.ndarray,
                  seq_len: np.ndarray, sigma: str = "identity") -> Tensor:
    """``Gating([S_CLS | S_PMA | S_recent])`` with a fixed ``n_cls+n_pma+n_recent`` columns.

    PMA attends over CLS and sequence tokens alike, so examples with empty
    histories still get a (context-only) summary when CLS tokens exist.
    """
    if n_cls + n_pma + n_recent < 1:
        raise ConfigError("sequence summary needs at least one token")
    if pad_mask.shape[-1] != S.cols:
        raise DimensionError(f"pad mask covers {pad_mask.shape[-1]} tokens, sequence has {S.cols}")
    parts = []
    if n_cls:
        parts.append(ag.slice_cols(S, 0, n_cls))
    if n_pma:
        pooled = pma(p["pma_seeds"], ag.transpose(S), p.scope("pma"), pad_mask)
        parts.append(ag.transpose(pooled))
    if n_recent:
        parts.append(recent_tokens(S, n_cls, n_recent, seq_len))
    return self_gating(ag.concat(parts, axis=-1), p, sigma)
