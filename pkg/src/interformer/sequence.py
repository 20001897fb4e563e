"""Attention stack for behaviour sequences.

Sequences travel between arches as ``(B, d, T)`` (embedding rows, token
columns). Attention works on the token-major transpose ``(B, T, d)``.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .layers import ParamStore, glorot, init_linear, linear


def rope(x: Tensor, positions) -> Tensor:
    """Rotate each column pair ``(2i, 2i+1)`` of token row ``t`` by
    ``positions[t] * 10000**(-2i/width)``."""
    width = x.cols
    if width % 2:
        raise ConfigError(f"rotary embedding needs an even width, got {width}")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (x.rows,):
        raise DimensionError(f"rope: {pos.shape[0] if pos.ndim else 0} positions for {x.rows} tokens")
    half = width // 2
    theta = 10000.0 ** (-2.0 * np.arange(half) / width)
    return ag.rotate_pairs(x, pos[:, None] * theta[None, :])


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, pad_mask: Optional[np.ndarray] = None,
                         return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_k)) V`` with invalid keys (``pad_mask`` False)
    given zero weight. ``pad_mask`` has shape ``(B, n_keys)`` or ``(n_keys,)``."""
    if Q.cols != K.cols:
        raise DimensionError(f"attention: query width {Q.cols} != key width {K.cols}")
    if K.rows != V.rows:
        raise DimensionError(f"attention: {K.rows} keys but {V.rows} values")
    logits = ag.scale(Q @ ag.transpose(K), 1.0 / math.sqrt(Q.cols))
    mask = None
    if pad_mask is not None:
        m = np.asarray(pad_mask, dtype=bool)
        mask = m[:, None, :] if m.ndim == 2 else m[None, :]
    weights = ag.softmax_rows(logits, mask)
    out = weights @ V
    return (out, weights) if return_weights else out


def init_attention(p: ParamStore, d: int, heads: int, d_k: int, rng) -> None:
    for i in range(heads):
        for kind in ("q", "k", "v"):
            p.add(f"{kind}{i}", glorot(rng, d, d_k))
    p.add("o", glorot(rng, heads * d_k, d))


def multi_head_attention(q_in: Tensor, kv_in: Tensor, p: ParamStore, pad_mask=None,
                         q_pos=None, k_pos=None) -> Tensor:
    """``[head_1 | ... | head_h] W_O`` with ``head_i = Attn(q W_i^Q, kv W_i^K, kv W_i^V)``.

    Inputs are token-major (``tokens x d``). When positions are given, queries
    and keys are rotated with ``rope`` before the dot products.
    """
    heads = []
    i = 0
    while f"q{i}" in p:
        q = q_in @ p[f"q{i}"]
        k = kv_in @ p[f"k{i}"]
        v = kv_in @ p[f"v{i}"]
        if q_pos is not None:
            q = rope(q, q_pos)
        if k_pos is not None:
            k = rope(k, k_pos)
        heads.append(scaled_dot_attention(q, k, v, pad_mask))
        i += 1
    if p["o"].rows != sum(h.cols for h in heads):
        raise DimensionError(f"output projector expects {p['o'].rows} inputs, heads give {sum(h.cols for h in heads)}")
    return ag.concat(heads, axis=-1) @ p["o"]


def pma(seeds: Tensor, S: Tensor, p: ParamStore, pad_mask=None) -> Tensor:
    """Pool token-major ``S`` into ``seeds.rows`` summary tokens by attending
    from learnable seed queries."""
    if seeds.rows < 1:
        raise ConfigError("PMA needs at least one seed")
    return multi_head_attention(seeds, S, p, pad_mask)


def prepend_cls(cls_tokens: Optional[Tensor], S: Tensor) -> Tensor:
    """``[CLS | S]`` along the token (column) axis."""
    if cls_tokens is None or cls_tokens.cols == 0:
        return S
    if cls_tokens.rows != S.rows:
        raise DimensionError(f"prepend_cls: CLS has d={cls_tokens.rows}, sequence has d={S.rows}")
    return ag.concat([cls_tokens, S], axis=-1)


# ---------------------------------------------------------------------------
# personalised FFN


def init_pffn(p: ParamStore, d: int, n_sum: int, hidden: int, rng) -> None:
    init_linear(p, "f1", d * n_sum, hidden, rng)
    p.scope("f2").add("w", np.zeros((hidden, d * d)))
    p.scope("f2").add("b", np.eye(d).reshape(1, d * d))


def pffn(x_sum: Tensor, S: Tensor, p: ParamStore, act: str = "swish") -> Tensor:
    """Apply the per-example ``d x d`` transform ``f(X_sum)`` to every token of ``S``."""
    d = S.rows
    if x_sum.rows != d:
        raise DimensionError(f"pffn: X_sum has d={x_sum.rows}, sequence has d={d}")
    if x_sum.batched != S.batched:
        raise DimensionError("pffn: X_sum and S must both be batched or both single")
    h = ag.activation(linear(ag.flatten(x_sum), p.scope("f1")), act)
    w = linear(h, p.scope("f2"))
    if w.cols != d * d:
        raise DimensionError(f"pffn: transform has {w.cols} entries, need {d * d}")
    W = ag.reshape(w, (S.shape[0], d, d) if S.batched else (d, d))
    return W @ S


# ---------------------------------------------------------------------------
# layer


def init_sequence_layer(p: ParamStore, cfg: ModelConfig, rng) -> None:
    d = cfg.dim
    init_pffn(p.scope("pffn"), d, cfg.n_sum, cfg.pffn_hidden, rng)
    p.add("ln_gamma", np.ones((1, d)))
    p.add("ln_beta", np.zeros((1, d)))
    init_attention(p.scope("mha"), d, cfg.heads, cfg.d_k, rng)


def sequence_param_count(cfg: ModelConfig) -> int:
    d = cfg.dim
    pffn_n = d * cfg.n_sum * cfg.pffn_hidden + cfg.pffn_hidden + cfg.pffn_hidden * d * d + d * d
    return pffn_n + 2 * d + 3 * cfg.heads * d * cfg.d_k + cfg.heads * cfg.d_k * d


def sequence_arch_layer(S: Tensor, x_sum: Tensor, p: ParamStore, pad_mask, positions,
                        act: str = "swish", eps: float = 1e-6) -> Tensor:
    """``U = PFFN(X_sum, S)``; output ``U + MHA(LN(U))`` with rotary positions,
    returned in the ``(B, d, T)`` layout of the input."""
    U = ag.transpose(pffn(x_sum, S, p.scope("pffn"), act))
    H = ag.layer_norm(U, p["ln_gamma"], p["ln_beta"], eps)
    A = multi_head_attention(H, H, p.scope("mha"), pad_mask, positions, positions)
    return ag.transpose(U + A)
