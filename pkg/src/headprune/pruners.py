"""Head pruning strategies.

Five ways of choosing which heads survive:

* ``michel``        gradient-magnitude importance, greedy block removal (pipelined)
* ``pipelined-dsp`` learned importance via relaxed Gumbel top-K on a frozen model
* ``joint-dsp``     the same relaxation while the model itself keeps training
* ``ste``           hard Gumbel top-K forward, identity backward
* ``voita``         Hard Concrete gates with an expected-L0 penalty

All of them end in a binary :data:`HeadMask`; evaluation never uses soft gates.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import DomainError
from .gumbel import TemperatureSchedule, hard_top_k, sample_gumbel, soft_top_k, temperature_at
from .model import GatedTransformer, compact, mask_to_bits
from .optim import SGD, make_optimizer

# Hard Concrete stretch interval and temperature
HC_GAMMA = -0.1
HC_ZETA = 1.1
HC_BETA = 2.0 / 3.0

METHODS = ("michel", "pipelined-dsp", "voita", "ste", "joint-dsp")


@dataclass
class ImportanceScores:
    values: np.ndarray
    provenance: str  # "learned-weights" | "gradient-proxy" | "gate-probability"

    def __post_init__(self):
        if np.any(self.values < 0):
            raise DomainError("importance scores must be non-negative")


@dataclass
class PruningOutcome:
    method: str
    K: int
    mask: np.ndarray
    scores: np.ndarray | None = None
    metric_pre: float | None = None
    metric_post: float | None = None
    lam: float | None = None
    seed: int | None = None
    history: list[dict] = field(default_factory=list)
    model: GatedTransformer | None = field(default=None, repr=False)

    @property
    def n_kept(self) -> int:
        return int(np.count_nonzero(self.mask))

    def to_record(self) -> dict:
        return {
            "method": self.method,
            "K": self.K,
            "lambda": self.lam,
            "seed": self.seed,
            "mask": mask_to_bits(self.mask),
            "metric_pre": self.metric_pre,
            "metric_post": self.metric_post,
            "history": self.history,
        }


@contextmanager
def frozen(model: GatedTransformer):
    """Stop gradients into model parameters (only gates/importances train)."""
    saved = [(t, t.requires_grad) for t in model.params.values()]
    for t, _ in saved:
        t.requires_grad = False
    try:
        yield model
    finally:
        for t, flag in saved:
            t.requires_grad = flag


def _iter_batches(data, batch_size: int):
    if isinstance(data, Dataset):
        yield from data.batches(batch_size)
    else:
        yield from data


# Michel et al. style gradient importance -------------------------------------


def michel_importance(model: GatedTransformer, data, batch_size: int = 64, mask=None) -> ImportanceScores:
    """Mean over examples of ``|dL/dg_h|`` evaluated at the current gates (default all ones).

    Per-example gate rows make one backward pass yield every example's gradient.
    """
    H = model.n_heads
    base = np.ones(H) if mask is None else np.asarray(mask, dtype=np.float64)
    total = np.zeros(H)
    count = 0
    with frozen(model):
        for batch in _iter_batches(data, batch_size):
            B = len(batch[0])
            gates = Tensor(np.tile(base, (B, 1)), requires_grad=True)
            loss = model.loss(batch, gates, per_example=True)
            ad.backward(loss)
            total += np.abs(gates.grad).sum(axis=0)
            count += B
    if count == 0:
        raise DomainError("importance needs at least one example")
    return ImportanceScores(total / count, "gradient-proxy")


def _keep_order(scores: np.ndarray, alive: np.ndarray) -> np.ndarray:
    """Alive head ids from most to least important; ties favour the lower index."""
    ids = np.flatnonzero(alive)
    return ids[np.argsort(-scores[ids], kind="stable")]


def default_block_size(H: int) -> int:
    return max(1, H // 10)


def greedy_pipeline_prune(
    model: GatedTransformer,
    data,
    block_size: int | None = None,
    targets=None,
    min_heads: int = 1,
    batch_size: int = 64,
) -> list[np.ndarray]:
    """Repeatedly drop the least important surviving heads, rescoring between blocks.

    Returns masks of strictly decreasing cardinality down to ``min_heads``.  A block
    is cut short whenever that lands exactly on one of ``targets``.
    """
    H = model.n_heads
    block = default_block_size(H) if block_size is None else block_size
    if block < 1:
        raise DomainError("removal block size must be at least 1")
    stops = sorted({int(k) for k in (targets or ())}, reverse=True)
    alive = np.ones(H, dtype=np.int8)
    masks: list[np.ndarray] = []
    while alive.sum() > min_heads:
        cur = int(alive.sum())
        below = [k for k in stops if k < cur]
        n_remove = min(block, cur - min_heads, cur - below[0] if below else block)
        scores = michel_importance(model, data, batch_size, mask=alive).values
        order = _keep_order(scores, alive)
        alive = alive.copy()
        alive[order[cur - n_remove :]] = 0
        masks.append(alive)
    return masks


def michel_prune(model: GatedTransformer, data, K: int, block_size: int | None = None, batch_size: int = 64) -> PruningOutcome:
    H = model.n_heads
    _check_k(K, H)
    if K == H:
        return PruningOutcome("michel", K, np.ones(H, dtype=np.int8))
    masks = greedy_pipeline_prune(model, data, block_size, targets=[K], min_heads=K, batch_size=batch_size)
    hist = [{"n_kept": int(m.sum()), "mask": mask_to_bits(m)} for m in masks]
    return PruningOutcome("michel", K, masks[-1], history=hist)


def _check_k(K: int, H: int) -> None:
    if not 1 <= K <= H:
        raise DomainError(f"K={K} outside [1, {H}]")


# differentiable subset pruning -----------------------------------------------


@dataclass
class StepResult:
    loss: float
    gates: np.ndarray
    noise: np.ndarray
    tau: float | None = None
    saturated: bool = False


def dsp_gates(w: Tensor, noise: np.ndarray, K: int, tau: float):
    return soft_top_k(ad.add(w, noise), K, tau)


def joint_dsp_step(model: GatedTransformer, w: Tensor, batch, n: int, K: int, schedule: TemperatureSchedule, rng) -> StepResult:
    """Forward/backward with relaxed top-K gates; grads land on model params and ``w``."""
    tau = temperature_at(schedule, n)
    noise = sample_gumbel(w.size, rng)
    gv = dsp_gates(w, noise, K, tau)
    loss = model.loss(batch, gv.g)
    ad.backward(loss)
    return StepResult(loss.item(), gv.values.copy(), noise, tau, gv.saturated)


def ste_step(model: GatedTransformer, w: Tensor, batch, K: int, rng) -> StepResult:
    """Hard top-K mask forward; ``dL/dg`` is copied straight into ``w.grad``."""
    noise = sample_gumbel(w.size, rng)
    mask = hard_top_k(w.data + noise, K)
    gates = Tensor(mask.astype(np.float64), requires_grad=True)
    loss = model.loss(batch, gates)
    ad.backward(loss)
    w.grad = gates.grad.copy() if w.grad is None else w.grad + gates.grad
    return StepResult(loss.item(), mask.astype(np.float64), noise)


def pipelined_dsp(
    model: GatedTransformer,
    data: Dataset,
    K: int,
    rng: np.random.Generator,
    schedule: TemperatureSchedule | None = None,
    lr_w: float = 0.2,
    batch_size: int = 32,
    cooldown_fraction: float = 0.8,
    optimizer: str = "sgd",
) -> PruningOutcome:
    """Learn head weights for one epoch over ``data`` with the model frozen; keep top-K of ``w``."""
    H = model.n_heads
    _check_k(K, H)
    w = Tensor(np.zeros(H), requires_grad=True)
    if K == H:
        return PruningOutcome("pipelined-dsp", K, np.ones(H, dtype=np.int8), scores=np.exp(w.data))
    steps = math.ceil(len(data) / batch_size)
    if schedule is None:
        schedule = TemperatureSchedule(0.1, 1e-8, 15000)
    schedule = TemperatureSchedule(schedule.tau_ini, schedule.tau_end, max(1, int(cooldown_fraction * steps)))
    opt = make_optimizer(optimizer, [w], lr_w)
    hist = []
    with frozen(model):
        for n, batch in enumerate(data.batches(batch_size, rng)):
            opt.zero_grad()
            res = joint_dsp_step(model, w, batch, n, K, schedule, rng)
            opt.step()
            hist.append({"step": n, "tau": res.tau, "loss": res.loss})
    mask = hard_top_k(w.data, K)
    return PruningOutcome("pipelined-dsp", K, mask, scores=np.exp(w.data), history=hist)


# Hard Concrete / Voita et al. ------------------------------------------------


def _np_sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def hard_concrete_gate(phi, rng: np.random.Generator, beta: float = HC_BETA, gamma: float = HC_GAMMA, zeta: float = HC_ZETA) -> Tensor:
    """Stretched-and-clipped binary Concrete sample for every entry of ``phi``."""
    if not beta > 0 or not gamma < 0 < 1 < zeta:
        raise DomainError("need beta > 0 and gamma < 0 < 1 < zeta")
    phi = phi if isinstance(phi, Tensor) else Tensor(phi)
    u = rng.random(phi.shape)
    while np.any(u == 0.0):
        u[u == 0.0] = rng.random(int(np.count_nonzero(u == 0.0)))
    s = ad.sigmoid(ad.scale(ad.add(phi, np.log(u) - np.log1p(-u)), 1.0 / beta))
    stretched = ad.add(ad.scale(s, zeta - gamma), gamma)
    lo = ad.clip_min(stretched, 0.0)
    return ad.neg(ad.clip_min(ad.neg(lo), -1.0))


def prob_nonzero(phi, beta: float = HC_BETA, gamma: float = HC_GAMMA, zeta: float = HC_ZETA) -> Tensor:
    """Closed-form ``P(g != 0 | phi) = sigmoid(phi - beta * log(-gamma / zeta))``."""
    phi = phi if isinstance(phi, Tensor) else Tensor(phi)
    return ad.sigmoid(ad.add(phi, -beta * math.log(-gamma / zeta)))


def expected_l0(phi, beta: float = HC_BETA, gamma: float = HC_GAMMA, zeta: float = HC_ZETA) -> Tensor:
    return ad.sum(prob_nonzero(phi, beta, gamma, zeta))


def voita_objective(task_loss, phi, lam: float, beta: float = HC_BETA, gamma: float = HC_GAMMA, zeta: float = HC_ZETA) -> Tensor:
    if lam < 0:
        raise DomainError("regularization weight must be non-negative")
    if lam == 0:
        return task_loss if isinstance(task_loss, Tensor) else Tensor(task_loss)
    return ad.add(task_loss, ad.scale(expected_l0(phi, beta, gamma, zeta), lam))


def voita_eval_gates(phi, gamma: float = HC_GAMMA, zeta: float = HC_ZETA) -> np.ndarray:
    """Noise-free test-time gate values ``clip(sigmoid(phi)(zeta-gamma)+gamma, 0, 1)``."""
    phi = phi.data if isinstance(phi, Tensor) else np.asarray(phi, dtype=np.float64)
    return np.clip(_np_sigmoid(phi) * (zeta - gamma) + gamma, 0.0, 1.0)


def voita_step(model: GatedTransformer, phi: Tensor, batch, lam: float, rng, beta: float = HC_BETA) -> StepResult:
    gates = hard_concrete_gate(phi, rng, beta)
    task = model.loss(batch, gates)
    total = voita_objective(task, phi, lam, beta)
    ad.backward(total)
    return StepResult(task.item(), gates.data.copy(), np.empty(0))


def adjust_mask_to_k(gate_values, mask, K: int) -> np.ndarray:
    """Smallest edit of ``mask`` with exactly K ones.

    Missing heads are re-included from the discarded ones by highest gate value;
    surplus heads are dropped from the kept ones by lowest gate value.  Ties
    favour the lower index.
    """
    values = np.asarray(gate_values, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    _check_k(K, values.size)
    out = mask.copy()
    kept = int(mask.sum())
    if kept < K:
        pool = np.flatnonzero(~mask)
        add = pool[np.argsort(-values[pool], kind="stable")][: K - kept]
        out[add] = True
    elif kept > K:
        pool = np.flatnonzero(mask)
        ranked = pool[np.argsort(-values[pool], kind="stable")]
        out[ranked[K:]] = False
    return out.astype(np.int8)


# finalization ----------------------------------------------------------------


def finalize_and_finetune(
    model: GatedTransformer,
    scores,
    K: int,
    finetune_steps: int,
    data: Dataset | None = None,
    evaluate=None,
    lr: float = 0.1,
    batch_size: int = 32,
    rng: np.random.Generator | None = None,
    method: str = "joint-dsp",
    mask=None,
) -> PruningOutcome:
    """Fix the mask (noise-free top-K of ``scores`` unless given), compact, optionally fine-tune.

    ``evaluate(model)`` returns the task metric; it is applied before and after
    fine-tuning of the compacted model.
    """
    H = model.n_heads
    _check_k(K, H)
    scores = np.asarray(scores, dtype=np.float64)
    mask = hard_top_k(scores, K) if mask is None else np.asarray(mask, dtype=np.int8)
    pruned = compact(model, mask)
    pre = evaluate(pruned) if evaluate else None
    hist = []
    if finetune_steps > 0:
        if data is None:
            raise DomainError("fine-tuning needs training data")
        rng = rng or np.random.default_rng(0)
        opt = SGD(pruned.parameters(), lr)
        step = 0
        while step < finetune_steps:
            for batch in data.batches(batch_size, rng):
                opt.zero_grad()
                loss = pruned.loss(batch)
                ad.backward(loss)
                opt.step()
                hist.append({"step": step, "loss": loss.item()})
                step += 1
                if step >= finetune_steps:
                    break
    post = evaluate(pruned) if (evaluate and finetune_steps > 0) else pre
    return PruningOutcome(method, K, mask, scores=scores, metric_pre=pre, metric_post=post, history=hist, model=pruned)
