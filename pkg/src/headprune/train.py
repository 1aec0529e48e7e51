"""Training loops for the unpruned, jointly pruned and Voita-regularized regimes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TASKS, ExperimentConfig
from .data import Dataset, gen_needle_data, gen_reversal_data, token_accuracy
from .errors import DivergenceError, NumericError
from .gumbel import hard_top_k
from .model import GatedTransformer, build_model
from .optim import make_optimizer
from .pruners import joint_dsp_step, ste_step, voita_eval_gates, voita_step

log = logging.getLogger(__name__)

STREAMS = ("data", "init", "batch", "gumbel", "concrete", "finetune")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per purpose, all derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass
class TaskData:
    train: Dataset
    val: Dataset
    heldout: Dataset


def make_task_data(cfg: ExperimentConfig, rng: np.random.Generator) -> TaskData:
    gen = gen_needle_data if TASKS[cfg.task] == "classifier" else gen_reversal_data
    d = cfg.data
    seeds = rng.integers(0, 2**31, size=3)
    return TaskData(
        gen(int(seeds[0]), d.train_size, d.vocab, d.length),
        gen(int(seeds[1]), d.val_size, d.vocab, d.length),
        gen(int(seeds[2]), d.heldout_size, d.vocab, d.length),
    )


def evaluate(model: GatedTransformer, data: Dataset, gates=None, batch_size: int = 500) -> float:
    """Accuracy for the classifier, greedy-decoding token accuracy for seq2seq."""
    correct = 0.0
    for start in range(0, len(data), batch_size):
        x, y = data.x[start : start + batch_size], data.y[start : start + batch_size]
        if model.config.task == "classifier":
            pred = model.predict(x, gates)
        else:
            pred = model.predict((x, y.shape[1]), gates)
        correct += token_accuracy(pred, y) * len(x)
    return correct / len(data)


@dataclass
class TrainResult:
    model: GatedTransformer
    scores: np.ndarray | None = None  # w (DSP/STE) or phi (Voita)
    log: list[dict] = field(default_factory=list)
    snapshots: list[np.ndarray] = field(default_factory=list)  # noise-free top-K per step
    max_gate: float = 0.0


def train(
    cfg: ExperimentConfig,
    regime: str,
    data: TaskData,
    streams: dict[str, np.random.Generator],
    K: int | None = None,
    lam: float | None = None,
    model: GatedTransformer | None = None,
    eval_every: int = 0,
) -> TrainResult:
    """Train from scratch (or from ``model``) under ``regime``.

    ``regime`` is ``none`` (plain), ``joint-dsp``, ``ste`` or ``voita``.  Model
    parameters train at ``lr_theta``; head weights ``w`` (or Hard Concrete
    locations ``phi``) train separately at ``lr_w``.
    """
    if model is None:
        model = build_model(cfg.build_model_config(), streams["init"])
    H = model.n_heads
    opt = make_optimizer(cfg.optimizer_theta, model.parameters(), cfg.lr_theta)
    scores = None
    if regime in ("joint-dsp", "ste"):
        scores = Tensor(np.zeros(H), requires_grad=True)
    elif regime == "voita":
        scores = Tensor(np.full(H, cfg.voita_phi_init), requires_grad=True)
    elif regime != "none":
        raise ValueError(f"unknown training regime {regime!r}")
    opt_w = make_optimizer(cfg.optimizer_w, [scores], cfg.lr_w) if scores is not None else None
    schedule = cfg.schedule.schedule()
    result = TrainResult(model)
    n = 0
    for epoch in range(cfg.epochs):
        for batch in data.train.batches(cfg.batch_size, streams["batch"]):
            opt.zero_grad()
            if opt_w:
                opt_w.zero_grad()
            try:
                if regime == "none":
                    loss = model.loss(batch)
                    ad.backward(loss)
                    entry = {"step": n, "loss": loss.item()}
                elif regime == "joint-dsp":
                    res = joint_dsp_step(model, scores, batch, n, K, schedule, streams["gumbel"])
                    entry = {"step": n, "loss": res.loss, "tau": res.tau}
                    result.max_gate = max(result.max_gate, float(res.gates.max()))
                elif regime == "ste":
                    res = ste_step(model, scores, batch, K, streams["gumbel"])
                    entry = {"step": n, "loss": res.loss}
                else:
                    res = voita_step(model, scores, batch, lam, streams["concrete"], cfg.voita_beta)
                    entry = {"step": n, "loss": res.loss}
            except NumericError as exc:
                raise DivergenceError(f"non-finite values at step {n} ({regime}, lr={cfg.lr_theta}): {exc}") from exc
            opt.step()
            if opt_w:
                opt_w.step()
            _check_finite(model, scores, entry["loss"], n, regime, cfg.lr_theta)
            if regime in ("joint-dsp", "ste"):
                result.snapshots.append(hard_top_k(scores.data, K))
            if eval_every and (n % eval_every == 0):
                entry["metric"] = evaluate(model, data.val, _eval_gates(regime, scores, K))
            result.log.append(entry)
            n += 1
        log.debug("epoch %d done, loss %.4f", epoch, result.log[-1]["loss"])
    if scores is not None:
        result.scores = scores.data.copy()
    return result


def _check_finite(model, scores, loss: float, n: int, regime: str, lr: float) -> None:
    tensors = model.parameters() + ([scores] if scores is not None else [])
    if not np.isfinite(loss) or not all(np.isfinite(t.data).all() for t in tensors):
        raise DivergenceError(f"non-finite loss or parameters after step {n} ({regime}, lr={lr})")


def _eval_gates(regime: str, scores: Tensor | None, K: int | None):
    if regime in ("joint-dsp", "ste"):
        return hard_top_k(scores.data, K)
    if regime == "voita":
        return (voita_eval_gates(scores) > 0).astype(np.float64)
    return None
