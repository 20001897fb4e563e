"""Central finite-difference checks of every differentiable op and of the model.

Each case builds random inputs, reduces the op output to a scalar with a fixed
random weighting, and compares the autograd gradient with
``(f(x + h) - f(x - h)) / 2h`` coordinate by coordinate.
"""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .cross import init_nonseq_summary, init_seq_summary, self_gating, init_gating, summarize_nonseq, summarize_seq
from .features import GenConfig, embed_batch, generate_synthetic, init_mask_net, mask_net
from .interaction import (dcn_cross_layer, dhen_layer, dot_interaction, fm_second_order, init_dhen_layer,
                          init_interaction_layer, interaction_arch_layer)
from .layers import ParamStore
from .model import init_params, interformer_forward, to_probability
from .sequence import (init_attention, init_pffn, init_sequence_layer, multi_head_attention, pffn, pma,
                       rope, sequence_arch_layer)
from .train import cross_entropy

STEP = 1e-5
TOL = 1e-4
# gradients smaller than this are compared in absolute terms
FLOOR = 1e-6

Inputs = Dict[str, np.ndarray]
Case = Callable[[np.random.Generator], Tuple[Callable[[Dict[str, Tensor]], Tensor], Inputs]]


@dataclass
class GradResult:
    name: str
    seed: int
    max_rel_err: float
    n_checked: int
    tol: float = TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        flag = "ok  " if self.passed else "FAIL"
        return f"{flag} {self.name:<28} seed={self.seed:<3} max_rel_err={self.max_rel_err:.3e} coords={self.n_checked}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _pick(shape: tuple, rng: np.random.Generator, limit: Optional[int]) -> np.ndarray:
    size = int(np.prod(shape))
    if limit is None or size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def check_function(name: str, fn: Callable[[Dict[str, Tensor]], Tensor], inputs: Inputs, seed: int,
                   max_coords: Optional[int] = None, step: float = STEP, tol: float = TOL) -> GradResult:
    """Compare autograd and central differences for ``sum(fn(inputs) * R)``."""
    rng = np.random.default_rng([seed, 7])
    probe = fn({k: Tensor(v) for k, v in inputs.items()})
    R = rng.uniform(-1.0, 1.0, size=probe.shape)

    def loss(arrays: Inputs, grad: bool) -> Tensor:
        ts = {k: Tensor(v, requires_grad=grad) for k, v in arrays.items()}
        return ag.sum_all(fn(ts) * Tensor(R)), ts

    out, ts = loss(inputs, True)
    ag.backward(out, ts.values())
    worst = 0.0
    count = 0
    for key, arr in inputs.items():
        analytic = ts[key].grad.reshape(-1)
        flat = arr.reshape(-1)
        for i in _pick(arr.shape, rng, max_coords):
            orig = flat[i]
            flat[i] = orig + step
            up = loss(inputs, False)[0].item()
            flat[i] = orig - step
            down = loss(inputs, False)[0].item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, float(relative_error(analytic[i], numeric)))
            count += 1
    return GradResult(name, seed, worst, count, tol)


# ---------------------------------------------------------------------------
# op cases: each returns (fn, inputs) with inputs drawn from [-2, 2]


def _u(rng, *shape) -> np.ndarray:
    return rng.uniform(-2.0, 2.0, size=shape)


def _store(ts: Dict[str, Tensor], prefix: str = "p.") -> ParamStore:
    return ParamStore(OrderedDict((k[len(prefix):], v) for k, v in ts.items() if k.startswith(prefix)))


def _params(store: ParamStore, rng, jitter: float = 0.3) -> Inputs:
    # jitter moves zero-initialised weights off their special values
    return {f"p.{k}": v.data + rng.normal(scale=jitter, size=v.shape) for k, v in store.items()}


def _case_matmul(rng):
    return (lambda t: t["a"] @ t["b"]), {"a": _u(rng, 3, 4), "b": _u(rng, 4, 2)}


def _case_matmul_batched(rng):
    return (lambda t: t["a"] @ t["b"]), {"a": _u(rng, 2, 3, 4), "b": _u(rng, 2, 4, 2)}


def _case_matmul_shared_right(rng):
    return (lambda t: t["a"] @ t["w"]), {"a": _u(rng, 3, 2, 4), "w": _u(rng, 4, 3)}


def _case_matmul_shared_left(rng):
    return (lambda t: t["w"] @ t["b"]), {"w": _u(rng, 2, 4), "b": _u(rng, 3, 4, 3)}


def _case_add_sub_mul(rng):
    return (lambda t: (t["a"] + t["b"]) * (t["a"] - t["c"])), {k: _u(rng, 2, 3, 2) for k in "abc"}


def _case_scale_shift(rng):
    return (lambda t: ag.shift(ag.scale(t["a"], -1.7), 0.4) * t["a"]), {"a": _u(rng, 3, 3)}


def _case_bias_add(rng):
    return (lambda t: ag.bias_add(ag.bias_add(t["x"], t["row"]), t["col"])), {
        "x": _u(rng, 2, 3, 4), "row": _u(rng, 1, 4), "col": _u(rng, 3, 1)}


def _case_broadcast_batch(rng):
    return (lambda t: ag.broadcast_batch(t["x"], 3) * t["y"]), {"x": _u(rng, 2, 3), "y": _u(rng, 3, 2, 3)}


def _case_shape_ops(rng):
    def fn(t):
        x = ag.reshape(ag.transpose(t["x"]), (2, 2, 6))
        return ag.flatten(x) * ag.flatten(x)
    return fn, {"x": _u(rng, 2, 4, 3)}


def _case_concat(rng):
    def fn(t):
        wide = ag.concat([t["a"], t["b"]], axis=-1)
        tall = ag.concat([wide, t["c"]], axis=-2)
        return tall * tall
    return fn, {"a": _u(rng, 2, 2, 3), "b": _u(rng, 2, 2, 1), "c": _u(rng, 2, 3, 4)}


def _case_take_slice(rng):
    def fn(t):
        picked = ag.take(t["x"], np.array([4, 0, 0, 2]), axis=-1)
        rows = ag.take(t["x"], np.array([1, 1, 0]), axis=-2)
        return ag.concat([picked * picked, ag.flatten(ag.slice_cols(rows, 1, 4)) @ Tensor(np.ones((9, 4)))], axis=-2)
    return fn, {"x": _u(rng, 2, 5)}


def _case_take_rows(rng):
    idx = np.array([[0, 3, 3], [2, 0, 1]])
    return (lambda t: ag.take_rows(t["table"], idx)), {"table": _u(rng, 4, 3)}


def _case_reductions(rng):
    return (lambda t: ag.scale(ag.sum_all(t["x"] * t["x"]), 0.5) + ag.mean_all(t["x"])), {"x": _u(rng, 2, 3, 4)}


def _case_rotate_pairs(rng):
    ang = rng.uniform(-3, 3, size=(3, 2))
    return (lambda t: ag.rotate_pairs(t["x"], ang)), {"x": _u(rng, 2, 3, 4)}


def _activation_case(kind):
    def case(rng):
        x = _u(rng, 3, 4)
        if kind == "relu":
            x[np.abs(x) < 1e-3] += 0.01  # keep clear of the kink
        return (lambda t: ag.activation(t["x"], kind)), {"x": x}
    case.__name__ = f"_case_{kind}"
    return case


def _case_log(rng):
    return (lambda t: ag.log(t["x"])), {"x": rng.uniform(0.2, 2.0, size=(3, 3))}


def _case_clip(rng):
    x = _u(rng, 4, 4)
    x[np.abs(np.abs(x) - 1.0) < 1e-3] += 0.01  # keep clear of the clip bounds
    return (lambda t: ag.clip(t["x"], -1.0, 1.0) * t["x"]), {"x": x}


def _case_softmax(rng):
    return (lambda t: ag.softmax_rows(t["x"])), {"x": _u(rng, 2, 3, 5)}


def _case_softmax_masked(rng):
    mask = rng.random((2, 3, 5)) < 0.6
    mask[..., 0] = True
    return (lambda t: ag.softmax_rows(t["x"], mask)), {"x": _u(rng, 2, 3, 5)}


def _case_layer_norm(rng):
    return (lambda t: ag.layer_norm(t["x"], t["g"], t["b"], 1e-6)), {
        "x": _u(rng, 2, 3, 5), "g": _u(rng, 1, 5), "b": _u(rng, 1, 5)}


def _case_cross_entropy(rng):
    y = (rng.random(6) < 0.5).astype(float)
    return (lambda t: cross_entropy(t["p"], y)), {"p": rng.uniform(0.05, 0.95, size=(6, 1))}


def _case_fm(rng):
    return (lambda t: fm_second_order(t["x"], t["v"], t["w"], t["w0"])), {
        "x": _u(rng, 3, 6), "v": _u(rng, 6, 4), "w": _u(rng, 6, 1), "w0": _u(rng, 1, 1)}


def _case_dot(rng):
    return (lambda t: dot_interaction(t["X"])), {"X": _u(rng, 2, 3, 4)}


def _case_dcn_full(rng):
    return (lambda t: dcn_cross_layer(t["x0"], t["xl"], t["w"], t["b"])), {
        "x0": _u(rng, 3, 5), "xl": _u(rng, 3, 5), "w": _u(rng, 5, 5), "b": _u(rng, 1, 5)}


def _case_dcn_lowrank(rng):
    return (lambda t: dcn_cross_layer(t["x0"], t["xl"], (t["u"], t["v"]), t["b"])), {
        "x0": _u(rng, 3, 6), "xl": _u(rng, 3, 6), "u": _u(rng, 6, 2), "v": _u(rng, 6, 2), "b": _u(rng, 1, 6)}


_TINY = ModelConfig(dim=4, heads=2, n_cls=2, n_pma=1, n_recent=2, n_sum=2, inter_hidden=6, pffn_hidden=5,
                    fm_rank=3, head_sizes=(6, 4))


def _case_dhen(rng):
    store = ParamStore()
    init_dhen_layer(store, 4, 3, _TINY, rng)
    inputs = _params(store, rng)
    inputs["X"] = _u(rng, 2, 4, 3)
    return (lambda t: dhen_layer(t["X"], _store(t), eps=1e-6)), inputs


def _interaction_case(backbone):
    def case(rng):
        cfg = _TINY.replace(backbone=backbone)
        store = ParamStore()
        init_interaction_layer(store, cfg, 3, 2, rng)
        inputs = _params(store, rng)
        inputs["X"] = _u(rng, 2, 4, 3)
        inputs["s_sum"] = _u(rng, 2, 4, 2)
        return (lambda t: interaction_arch_layer(t["X"], t["s_sum"], _store(t), cfg)), inputs
    case.__name__ = f"_case_interaction_{backbone}"
    return case


def _case_rope(rng):
    pos = np.arange(5) + 2.0
    return (lambda t: rope(t["x"], pos)), {"x": _u(rng, 2, 5, 4)}


def _case_mha(rng):
    store = ParamStore()
    init_attention(store, 4, 2, 2, rng)
    inputs = _params(store, rng)
    inputs["q"] = _u(rng, 2, 3, 4)
    inputs["kv"] = _u(rng, 2, 5, 4)
    mask = np.array([[True] * 5, [False, False, True, True, True]])
    return (lambda t: multi_head_attention(t["q"], t["kv"], _store(t), mask, np.arange(3.0), np.arange(5.0))), inputs


def _case_pma(rng):
    store = ParamStore()
    init_attention(store, 4, 2, 2, rng)
    inputs = _params(store, rng)
    inputs["seeds"] = _u(rng, 2, 4)
    inputs["S"] = _u(rng, 2, 4, 4)
    return (lambda t: pma(t["seeds"], t["S"], _store(t))), inputs


def _case_pffn(rng):
    store = ParamStore()
    init_pffn(store, 4, 2, 5, rng)
    inputs = _params(store, rng)
    inputs["x_sum"] = _u(rng, 2, 4, 2)
    inputs["S"] = _u(rng, 2, 4, 3)
    return (lambda t: pffn(t["x_sum"], t["S"], _store(t))), inputs


def _case_sequence_layer(rng):
    store = ParamStore()
    init_sequence_layer(store, _TINY, rng)
    inputs = _params(store, rng)
    inputs["S"] = _u(rng, 2, 4, 5)
    inputs["x_sum"] = _u(rng, 2, 4, 2)
    mask = np.array([[True] * 5, [True, True, False, True, True]])
    return (lambda t: sequence_arch_layer(t["S"], t["x_sum"], _store(t), mask, np.arange(5.0))), inputs


def _gating_case(sigma):
    def case(rng):
        store = ParamStore()
        init_gating(store, 3, 2, rng)
        inputs = _params(store, rng)
        inputs["X"] = _u(rng, 2, 3, 2)
        return (lambda t: self_gating(t["X"], _store(t), sigma)), inputs
    case.__name__ = f"_case_gating_{sigma}"
    return case


def _case_summarize_nonseq(rng):
    store = ParamStore()
    init_nonseq_summary(store, 4, 5, 2, rng)
    inputs = _params(store, rng)
    inputs["X"] = _u(rng, 2, 4, 5)
    return (lambda t: summarize_nonseq(t["X"], _store(t))), inputs


def _case_summarize_seq(rng):
    store = ParamStore()
    init_seq_summary(store, _TINY, rng)
    inputs = _params(store, rng)
    inputs["S"] = _u(rng, 2, 4, 2 + 4)
    seq_len = np.array([4, 1])
    mask = np.concatenate([np.ones((2, 2), bool), np.arange(4)[None, :] >= 4 - seq_len[:, None]], axis=1)
    return (lambda t: summarize_seq(t["S"], 2, 1, 2, _store(t), mask, seq_len)), inputs


def _case_mask_net(rng):
    store = ParamStore()
    init_mask_net(store, 2, 3, rng)
    inputs = _params(store, rng)
    inputs["s0"] = _u(rng, 2, 3, 4)
    inputs["s1"] = _u(rng, 2, 3, 4)
    return (lambda t: mask_net([t["s0"], t["s1"]], _store(t))), inputs


OP_CASES: "OrderedDict[str, Case]" = OrderedDict([
    ("matmul", _case_matmul),
    ("matmul_batched", _case_matmul_batched),
    ("matmul_shared_right", _case_matmul_shared_right),
    ("matmul_shared_left", _case_matmul_shared_left),
    ("add_sub_mul", _case_add_sub_mul),
    ("scale_shift", _case_scale_shift),
    ("bias_add", _case_bias_add),
    ("broadcast_batch", _case_broadcast_batch),
    ("transpose_reshape_flatten", _case_shape_ops),
    ("concat", _case_concat),
    ("take_slice", _case_take_slice),
    ("take_rows", _case_take_rows),
    ("sum_mean", _case_reductions),
    ("rotate_pairs", _case_rotate_pairs),
    *((f"activation_{k}", _activation_case(k)) for k in ag.ACTIVATIONS),
    ("log", _case_log),
    ("clip", _case_clip),
    ("softmax", _case_softmax),
    ("softmax_masked", _case_softmax_masked),
    ("layer_norm", _case_layer_norm),
    ("cross_entropy", _case_cross_entropy),
    ("fm_second_order", _case_fm),
    ("dot_interaction", _case_dot),
    ("dcn_cross_full", _case_dcn_full),
    ("dcn_cross_lowrank", _case_dcn_lowrank),
    ("dhen_layer", _case_dhen),
    *((f"interaction_{b}", _interaction_case(b)) for b in ("dot", "fm", "dcnv2", "dhen")),
    ("rope", _case_rope),
    ("multi_head_attention", _case_mha),
    ("pma", _case_pma),
    ("pffn", _case_pffn),
    ("sequence_layer", _case_sequence_layer),
    ("gating_identity", _gating_case("identity")),
    ("gating_sigmoid", _gating_case("sigmoid")),
    ("summarize_nonseq", _case_summarize_nonseq),
    ("summarize_seq", _case_summarize_seq),
    ("mask_net", _case_mask_net),
])

# composite cases have many parameters; a random sample of coordinates per input keeps them fast
_SAMPLED = {"dhen_layer", "interaction_dot", "interaction_fm", "interaction_dcnv2", "interaction_dhen",
            "multi_head_attention", "pma", "pffn", "sequence_layer", "summarize_seq", "mask_net"}


def check_op(name: str, seed: int, tol: float = TOL) -> GradResult:
    rng = np.random.default_rng(seed)
    fn, inputs = OP_CASES[name](rng)
    return check_function(name, fn, inputs, seed, max_coords=6 if name in _SAMPLED else None, tol=tol)


# ---------------------------------------------------------------------------
# end-to-end model


def tiny_problem(seed: int, n: int = 6):
    """A small schema and batch for model-level checks."""
    gen = GenConfig(n_examples=n, dense_count=2, n_users=3, n_categories=5, extra_sparse=(4,), n_brands=4,
                    seq_len=5, min_seq_len=1, dim=4, test_fraction=0.0)
    raw = generate_synthetic(gen, seed)
    # one example with an empty history
    raw.seqs[0] = 0
    raw.seq_lens[0] = 0
    return gen.schema(), raw


def check_model(cfg: ModelConfig, seed: int, per_tensor: int = 2, tol: float = TOL) -> GradResult:
    """Finite-difference check of the cross-entropy loss of the whole model with
    respect to a random sample of coordinates from every parameter tensor."""
    schema, raw = tiny_problem(seed)
    rng = np.random.default_rng([seed, 11])
    params = init_params(cfg, schema, seed)
    for _, t in params.items():
        t.data = t.data + rng.normal(scale=0.1, size=t.shape)

    def loss() -> Tensor:
        batch = embed_batch(schema, raw, params.scope("embed"))
        return cross_entropy(to_probability(interformer_forward(batch, params, cfg)), raw.label)

    params.zero_grad()
    ag.backward(loss(), params.tensors())
    worst = 0.0
    count = 0
    for _, t in params.items():
        flat = t.data.reshape(-1)
        analytic = t.grad.reshape(-1)
        for i in _pick(t.shape, rng, per_tensor):
            orig = flat[i]
            flat[i] = orig + STEP
            up = loss().item()
            flat[i] = orig - STEP
            down = loss().item()
            flat[i] = orig
            worst = max(worst, float(relative_error(analytic[i], (up - down) / (2 * STEP))))
            count += 1
    return GradResult(f"model_{cfg.mode}_{cfg.backbone}_L{cfg.n_layers}", seed, worst, count, tol)


MODEL_CFG = _TINY.replace(n_layers=1, mode="int", backbone="dhen")


def run_suite(seeds: Iterable[int] = range(20), ops: Optional[Iterable[str]] = None, model: bool = True,
              tol: float = TOL, log: Optional[Callable[[str], None]] = None) -> List[GradResult]:
    results = []
    names = list(ops) if ops is not None else list(OP_CASES)
    t0 = time.perf_counter()
    for seed in seeds:
        for name in names:
            results.append(check_op(name, seed, tol))
        if model:
            results.append(check_model(MODEL_CFG, seed, tol=tol))
        if log:
            bad = [r for r in results if r.seed == seed and not r.passed]
            log(f"seed {seed}: {len(names) + int(model)} checks, {len(bad)} failures "
                f"({time.perf_counter() - t0:.1f}s)")
            for r in bad:
                log("  " + r.line())
    return results


def worst_by_case(results: List[GradResult]) -> "OrderedDict[str, GradResult]":
    out: "OrderedDict[str, GradResult]" = OrderedDict()
    for r in results:
        if r.name not in out or r.max_rel_err > out[r.name].max_rel_err:
            out[r.name] = r
    return out


__all__ = ["GradResult", "OP_CASES", "MODEL_CFG", "STEP", "TOL", "check_function", "check_model", "check_op",
           "relative_error", "run_suite", "tiny_problem", "worst_by_case"]
