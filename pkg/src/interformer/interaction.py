"""Non-sequence interaction backbones and the interaction arch layer.

Every backbone consumes ``Z = [X | S_sum]`` of shape ``(B, d, N')`` and emits a
flat per-example feature vector; the arch MLP reshapes that back to
``(B, d, N)`` so layers stack.
"""

from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .errors import ConfigError, DimensionError
from .layers import ParamStore, glorot, init_linear, init_mlp, linear, mlp, mlp_param_count


def triu_indices(n: int) -> np.ndarray:
    """Flat row-major positions of the upper triangle (with diagonal) of n x n."""
    r, c = np.triu_indices(n)
    return r * n + c


def dot_interaction(X: Tensor) -> Tensor:
    """Pairwise inner products of the columns of ``X`` (``d x N``), returned as
    the flattened upper triangle of the Gram matrix, length ``N(N+1)/2``."""
    N = X.cols
    gram = ag.transpose(X) @ X
    return ag.take(ag.flatten(gram), triu_indices(N), axis=-1)


def fm_second_order(x: Tensor, v: Tensor, w: Tensor, w0: Tensor) -> Tensor:
    """Factorization-machine score for row vectors ``x`` (``B x D``).

    Pair term via ``0.5 * sum_f [(x v)_f^2 - (x^2 v^2)_f]``, plus ``x w + w0``.
    ``v`` is ``D x r``, ``w`` is ``D x 1`` and ``w0`` is ``1 x 1``.
    """
    D = x.cols
    if v.rows != D or w.shape != (D, 1) or w0.shape != (1, 1):
        raise DimensionError(f"fm: x has {D} entries but v={v.shape}, w={w.shape}, w0={w0.shape}")
    xv = x @ v
    pair = (xv * xv) - (x * x) @ (v * v)
    ones = Tensor(np.ones((v.cols, 1)))
    return ag.bias_add(ag.scale(pair @ ones, 0.5) + x @ w, w0)


def dcn_cross_layer(x0: Tensor, xl: Tensor, w: Union[Tensor, Sequence[Tensor]], b: Tensor) -> Tensor:
    """``x0 * (w xl + b) + xl`` on row vectors; ``w`` is ``D x D`` or a low-rank
    pair ``(U, V)`` meaning ``w = U V^T``."""
    if x0.shape != xl.shape:
        raise DimensionError(f"dcn: x0 {x0.shape} and xl {xl.shape} differ")
    D = xl.cols
    if b.shape != (1, D):
        raise DimensionError(f"dcn: bias must be (1, {D}), got {b.shape}")
    if isinstance(w, Tensor):
        if w.shape != (D, D):
            raise DimensionError(f"dcn: weight must be ({D}, {D}), got {w.shape}")
        wx = xl @ ag.transpose(w)
    else:
        U, V = w
        if U.rows != D or V.rows != D or U.cols != V.cols:
            raise DimensionError(f"dcn: low-rank factors {U.shape}, {V.shape} do not fit {D}")
        wx = (xl @ V) @ ag.transpose(U)
    return x0 * ag.bias_add(wx, b) + xl


def _dcn_rank(cfg: ModelConfig, D: int) -> Optional[int]:
    return cfg.dcn_rank if D >= cfg.dcn_rank else None


def _init_cross(p: ParamStore, D: int, cfg: ModelConfig, rng) -> None:
    r = _dcn_rank(cfg, D)
    for i in range(cfg.n_cross):
        c = p.scope(f"cross{i}")
        if r is None:
            c.add("w", glorot(rng, D, D) * 0.5)
        else:
            c.add("u", glorot(rng, D, r))
            c.add("v", glorot(rng, D, r))
        c.add("b", np.zeros((1, D)))


def _cross_stack(x0: Tensor, p: ParamStore) -> Tensor:
    x = x0
    i = 0
    while f"cross{i}.b" in p:
        c = p.scope(f"cross{i}")
        w = c["w"] if "w" in c else (c["u"], c["v"])
        x = dcn_cross_layer(x0, x, w, c["b"])
        i += 1
    return x


DHEN_MODULES = ("dot", "dcn")


def _dhen_module_width(name: str, d: int, N: int) -> int:
    return N * (N + 1) // 2 if name == "dot" else d * N


def init_dhen_layer(p: ParamStore, d: int, N: int, cfg: ModelConfig, rng, modules=DHEN_MODULES) -> None:
    D = d * N
    if "dcn" in modules:
        _init_cross(p.scope("dcn"), D, cfg, rng)
    width = sum(_dhen_module_width(m, d, N) for m in modules)
    init_linear(p, "proj", width, D, rng)
    init_linear(p, "shortcut", D, D, rng)
    p.add("gamma", np.ones((1, D)))
    p.add("beta", np.zeros((1, D)))


def dhen_layer(X: Tensor, p: ParamStore, modules: Sequence[str] = DHEN_MODULES, eps: float = 1e-6) -> Tensor:
    """``Norm(proj([m_1(X) | ... | m_k(X)]) + ShortCut(X))`` with output shaped like ``X``."""
    if not modules:
        raise ConfigError("DHEN ensemble needs at least one module")
    shape = X.shape
    flat = ag.flatten(X)
    outs = []
    for m in modules:
        if m == "dot":
            outs.append(dot_interaction(X))
        elif m == "dcn":
            outs.append(_cross_stack(flat, p.scope("dcn")))
        else:
            raise ConfigError(f"unknown DHEN module {m!r}")
    ens = linear(ag.concat(outs, axis=-1), p.scope("proj"))
    y = ag.layer_norm(ens + linear(flat, p.scope("shortcut")), p["gamma"], p["beta"], eps)
    return ag.reshape(y, shape)


# ---------------------------------------------------------------------------
# arch layer


def backbone_width(cfg: ModelConfig, d: int, N: int) -> int:
    D = d * N
    if cfg.backbone == "dot":
        return D + N * (N + 1) // 2
    if cfg.backbone == "fm":
        return D + 1
    return D


def init_interaction_layer(p: ParamStore, cfg: ModelConfig, n_cols: int, n_summary: int, rng) -> None:
    d = cfg.dim
    N = n_cols + n_summary
    D = d * N
    if cfg.backbone == "fm":
        f = p.scope("fm")
        f.add("v", rng.normal(scale=0.1, size=(D, cfg.fm_rank)))
        f.add("w", np.zeros((D, 1)))
        f.add("w0", np.zeros((1, 1)))
    elif cfg.backbone == "dcnv2":
        _init_cross(p.scope("dcn"), D, cfg, rng)
    elif cfg.backbone == "dhen":
        for j in range(cfg.dhen_layers):
            init_dhen_layer(p.scope(f"dhen{j}"), d, N, cfg, rng)
    init_mlp(p, "mlp", [backbone_width(cfg, d, N), cfg.inter_hidden, d * n_cols], rng)


def interaction_param_count(cfg: ModelConfig, n_cols: int, n_summary: int) -> int:
    d = cfg.dim
    N = n_cols + n_summary
    D = d * N

    def cross():
        r = _dcn_rank(cfg, D)
        return cfg.n_cross * ((D * D if r is None else 2 * D * r) + D)

    n = mlp_param_count([backbone_width(cfg, d, N), cfg.inter_hidden, d * n_cols])
    if cfg.backbone == "fm":
        n += D * cfg.fm_rank + D + 1
    elif cfg.backbone == "dcnv2":
        n += cross()
    elif cfg.backbone == "dhen":
        width = N * (N + 1) // 2 + D
        n += cfg.dhen_layers * (cross() + width * D + D + D * D + D + 2 * D)
    return n


def interaction_arch_layer(X: Tensor, s_sum: Optional[Tensor], p: ParamStore, cfg: ModelConfig) -> Tensor:
    """``MLP(Interaction([X | S_sum]))`` reshaped to the shape of ``X``."""
    if s_sum is not None and s_sum.cols and s_sum.rows != X.rows:
        raise DimensionError(f"interaction arch: X has d={X.rows}, S_sum has d={s_sum.rows}")
    Z = X if s_sum is None or s_sum.cols == 0 else ag.concat([X, s_sum], axis=-1)
    flat = ag.flatten(Z)
    if cfg.backbone == "dot":
        feats = ag.concat([flat, dot_interaction(Z)], axis=-1)
    elif cfg.backbone == "fm":
        f = p.scope("fm")
        feats = ag.concat([flat, fm_second_order(flat, f["v"], f["w"], f["w0"])], axis=-1)
    elif cfg.backbone == "dcnv2":
        feats = _cross_stack(flat, p.scope("dcn"))
    else:
        Y = Z
        for j in range(cfg.dhen_layers):
            Y = dhen_layer(Y, p.scope(f"dhen{j}"), eps=cfg.ln_eps)
        feats = ag.flatten(Y)
    out = mlp(feats, p.scope("mlp"), act=cfg.activation)
    return ag.reshape(out, X.shape)
