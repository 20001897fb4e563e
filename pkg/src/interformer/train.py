"""Adam, the training loop with plateau decay and early stopping, and its report."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig
from .errors import DataError, OptimizerError
from .features import Dataset
from .metrics import auc, evaluate, gauc, log_loss, normalized_entropy
from .model import InterFormer, to_probability

logger = logging.getLogger(__name__)


def cross_entropy(y_hat: Tensor, y) -> Tensor:
    """Mean ``-(y log p + (1 - y) log(1 - p))`` over a ``(B, 1)`` probability column."""
    lab = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if not np.isin(lab, (0.0, 1.0)).all():
        raise DataError("labels must be 0 or 1")
    if y_hat.shape != lab.shape:
        raise DataError(f"predictions {y_hat.shape} do not match {lab.shape[0]} labels")
    pos = Tensor(lab) * ag.log(y_hat)
    neg = Tensor(1.0 - lab) * ag.log(ag.shift(ag.scale(y_hat, -1.0), 1.0))
    return ag.scale(ag.mean_all(pos + neg), -1.0)


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, grads: Optional[Sequence[np.ndarray]] = None) -> AdamState:
    """One bias-corrected Adam update, in place. ``grads`` defaults to each
    parameter's ``.grad`` (missing gradients count as zero)."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise OptimizerError(f"{len(grads)} gradients for {len(params)} parameters")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise OptimizerError("optimizer state was built for a different parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise OptimizerError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 5
    lr_decay: float = 0.5
    eval_batch_size: int = 2048


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_auc: float
    train_gauc: float
    train_ne: float
    test_auc: float
    test_gauc: float
    test_logloss: float
    test_ne: float


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best(self) -> EpochRecord:
        return self.epochs[self.best_epoch - 1]

    def metrics_csv(self) -> str:
        """``epoch,split,loss,auc,gauc,ne`` rows; floats in shortest round-trip form."""
        out = io.StringIO()
        out.write("epoch,split,loss,auc,gauc,ne\n")
        for r in self.epochs:
            out.write(f"{r.epoch},train,{r.train_loss!r},{r.train_auc!r},{r.train_gauc!r},{r.train_ne!r}\n")
            out.write(f"{r.epoch},test,{r.test_logloss!r},{r.test_auc!r},{r.test_gauc!r},{r.test_ne!r}\n")
        return out.getvalue()

    def summary(self) -> str:
        b = self.best
        return (
            f"epochs run: {len(self.epochs)} ({self.stop_reason}); best epoch {self.best_epoch}: "
            f"AUC={b.test_auc:.6f} gAUC={b.test_gauc:.6f} LogLoss={b.test_logloss:.6f} NE={b.test_ne:.6f}"
        )


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except Exception:
        return float("nan")


def evaluate_model(model: InterFormer, ds: Dataset, train_ctr: float, batch_size: int = 2048) -> dict:
    probs = model.predict(ds, batch_size)
    return evaluate(probs, ds.label, ds.user_id, train_ctr)


def train(dataset: Dataset, cfg: ModelConfig, seed: int, tcfg: Optional[TrainConfig] = None,
          model: Optional[InterFormer] = None):
    """Fit a model with Adam; returns ``(model at its best epoch, TrainReport)``.

    The learning rate halves (``lr_decay``) after every epoch whose test AUC
    does not beat the best so far; ``patience`` such epochs in a row stop
    training. Shuffling and initialisation derive from ``seed`` alone.
    """
    tcfg = tcfg or TrainConfig()
    train_ds, test_ds = dataset.train(), dataset.test()
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise DataError("both the train and the test split must be non-empty")
    ctr = dataset.background_ctr
    if not 0.0 < ctr < 1.0:
        raise DataError(f"background CTR {ctr} must lie in (0, 1)")
    rng = np.random.default_rng([seed, 1])
    model = model or InterFormer(cfg, dataset.schema, seed=seed)
    params = model.params.tensors()
    state = AdamState(lr=tcfg.lr)
    report = TrainReport()
    best_auc = -np.inf
    best_snapshot = model.params.snapshot()
    stale = 0
    n = len(train_ds)
    for epoch in range(1, tcfg.max_epochs + 1):
        order = rng.permutation(n)
        probs = np.empty(n)
        losses = 0.0
        for start in range(0, n, tcfg.batch_size):
            idx = order[start:start + tcfg.batch_size]
            raw = train_ds.subset(idx)
            model.params.zero_grad()
            p_hat = to_probability(model.logits(raw))
            loss = cross_entropy(p_hat, raw.label)
            ag.backward(loss, params)
            adam_step(params, state)
            probs[idx] = p_hat.data[:, 0]
            losses += loss.item() * len(idx)
        train_loss = losses / n
        te = evaluate_model(model, test_ds, ctr, tcfg.eval_batch_size)
        rec = EpochRecord(
            epoch, state.lr, train_loss,
            _safe(auc, probs, train_ds.label), _safe(gauc, probs, train_ds.label, train_ds.user_id),
            normalized_entropy(log_loss(probs, train_ds.label), ctr),
            te["auc"], te["gauc"], te["logloss"], te["ne"],
        )
        report.epochs.append(rec)
        logger.info("epoch %d lr=%.2e train_loss=%.5f test_auc=%.5f", epoch, state.lr, train_loss, te["auc"])
        if te["auc"] > best_auc:
            best_auc = te["auc"]
            report.best_epoch = epoch
            best_snapshot = model.params.snapshot()
            stale = 0
        else:
            stale += 1
            state.lr *= tcfg.lr_decay
            if stale >= tcfg.patience:
                report.stop_reason = f"early stop: {stale} epochs without test AUC gain"
                break
    else:
        report.stop_reason = f"reached max_epochs={tcfg.max_epochs}"
    model.params.restore(best_snapshot)
    return model, report
