"""Fast property checks run by the ``gradcheck`` command next to the
finite-difference suite. Each check returns an ``InvariantResult``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .cross import init_gating, init_seq_summary, self_gating, summarize_seq
from .layers import ParamStore
from .model import checkpoint_bytes, init_params, parse_checkpoint, InterFormer
from .sequence import rope


@dataclass
class InvariantResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'ok  ' if self.passed else 'FAIL'} {self.name:<28} {self.detail}"


def softmax_normalization(seed: int) -> InvariantResult:
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1e3, 1e3, size=(8, 6, 9))
    mask = rng.random((8, 6, 9)) < 0.5
    mask[..., 3] = True
    plain = ag.softmax_rows(Tensor(x)).data
    masked = ag.softmax_rows(Tensor(x), mask).data
    err = max(np.abs(plain.sum(-1) - 1).max(), np.abs(masked.sum(-1) - 1).max())
    leaked = np.abs(masked[~mask]).max()
    return InvariantResult("softmax_normalization", err <= 1e-12 and leaked == 0.0,
                           f"max |row sum - 1| = {err:.2e}, masked weight = {leaked:.1e}")


def rope_isometry(seed: int) -> InvariantResult:
    rng = np.random.default_rng(seed)
    T, w = 7, 8
    pos = np.arange(T, dtype=float)
    x = rng.normal(size=(3, T, w))
    y = rope(Tensor(x), pos).data
    norm_err = np.abs(np.linalg.norm(y, axis=-1) - np.linalg.norm(x, axis=-1)).max()
    # <rope(q, m), rope(k, n)> depends on m - n only
    q, k = rng.normal(size=(1, w)), rng.normal(size=(1, w))

    def score(m, n):
        return float((rope(Tensor(q), [m]).data @ rope(Tensor(k), [n]).data.T)[0, 0])

    rel_err = max(abs(score(m, n) - score(m + s, n + s)) for m, n, s in [(3, 1, 5), (0, 4, 11), (2, 2, 7)])
    ok = norm_err <= 1e-12 and rel_err <= 1e-9
    return InvariantResult("rope_isometry_relative", ok, f"norm err {norm_err:.2e}, shift err {rel_err:.2e}")


def _tiny(seed: int):
    from .gradcheck import MODEL_CFG, tiny_problem

    schema, raw = tiny_problem(seed)
    return MODEL_CFG, schema, raw


def mask_correctness(seed: int) -> InvariantResult:
    """Rewriting padded history slots must not change any prediction."""
    cfg, schema, raw = _tiny(seed)
    model = InterFormer(cfg, schema, seed=seed)
    base = model.logits(raw).data
    noisy = raw.subset(np.arange(len(raw)))
    rng = np.random.default_rng([seed, 3])
    T = schema.seq_len
    for j, spec in enumerate(schema.sequences):
        pad = np.arange(T)[None, :] < (T - noisy.seq_lens[:, j:j + 1])
        noise = rng.integers(0, spec.vocab, size=pad.shape)
        noisy.seqs[:, j, :] = np.where(pad, noise, noisy.seqs[:, j, :])
    err = float(np.abs(model.logits(noisy).data - base).max())
    return InvariantResult("mask_correctness", err == 0.0, f"max logit change {err:.1e}")


def gating_transparency(seed: int) -> InvariantResult:
    rng = np.random.default_rng(seed)
    p = ParamStore()
    init_gating(p, 4, 3, rng)
    X = rng.normal(size=(5, 4, 3))
    out = self_gating(Tensor(X), p).data
    return InvariantResult("gating_transparency", np.array_equal(out, X), "identity-initialised gate returns X")


def summary_arity(seed: int) -> InvariantResult:
    cfg, _, _ = _tiny(seed)
    rng = np.random.default_rng(seed)
    p = ParamStore()
    init_seq_summary(p, cfg, rng)
    T = 5
    widths = set()
    for seq_len in ([0, 0], [1, 5], [2, 3]):
        lens = np.array(seq_len)
        mask = np.concatenate([np.ones((2, cfg.n_cls), bool), np.arange(T)[None, :] >= T - lens[:, None]], axis=1)
        S = Tensor(rng.normal(size=(2, cfg.dim, cfg.n_cls + T)))
        widths.add(summarize_seq(S, cfg.n_cls, cfg.n_pma, cfg.n_recent, p, mask, lens).cols)
    want = cfg.n_cls + cfg.n_pma + cfg.n_recent
    return InvariantResult("summary_arity", widths == {want}, f"widths {sorted(widths)}, expected {want}")


def checkpoint_roundtrip(seed: int) -> InvariantResult:
    cfg, schema, raw = _tiny(seed)
    model = InterFormer(cfg, schema, params=init_params(cfg, schema, seed))
    blob = checkpoint_bytes(model)
    again = parse_checkpoint(blob)
    same_bytes = checkpoint_bytes(again) == blob
    same_logits = np.array_equal(model.logits(raw).data, again.logits(raw).data)
    return InvariantResult("checkpoint_roundtrip", same_bytes and same_logits,
                           f"bytes identical: {same_bytes}, logits identical: {same_logits}")


CHECKS: List[Callable[[int], InvariantResult]] = [
    softmax_normalization, rope_isometry, mask_correctness, gating_transparency, summary_arity,
    checkpoint_roundtrip,
]


def run_invariants(seeds=range(3)) -> List[InvariantResult]:
    return [check(seed) for seed in seeds for check in CHECKS]
