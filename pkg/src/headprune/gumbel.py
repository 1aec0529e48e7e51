"""Gumbel machinery for sampling and relaxing head subsets.

Head importances are parameterized as ``iota = exp(w)``, so ``w`` plays the role
of log-importance and perturbed logits are ``r = w + n`` with ``n ~ Gumbel(0, 1)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ComplexityGuardError, ContractError, DomainError

# floor for the log(1 - g) suppression term between relaxed rounds
LOG_FLOOR = 1e-12
MAX_ORACLE_K = 8


def sample_gumbel(H: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``H`` independent standard Gumbel variates as ``-log(-log U)``, U in (0, 1)."""
    if H < 1:
        raise DomainError("need at least one head to perturb")
    u = rng.random(H)
    # Generator.random is on [0, 1); redraw the (vanishingly rare) exact zeros
    while np.any(u == 0.0):
        zeros = u == 0.0
        u[zeros] = rng.random(int(zeros.sum()))
    return -np.log(-np.log(u))


def importance(w) -> np.ndarray:
    return np.exp(np.asarray(w, dtype=np.float64))


def gumbel_argmax(w, noise) -> int:
    """Index of the largest perturbed logit; ties go to the lowest index."""
    w = np.asarray(w, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if w.shape != noise.shape:
        raise ContractError(f"weights {w.shape} and noise {noise.shape} differ in length")
    return int(np.argmax(w + noise))


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise DomainError(f"temperature must be positive, got {tau}")


def gumbel_softmax(r, tau: float) -> Tensor:
    """``softmax(r / tau)``; differentiable in ``r`` when it is a tracked Tensor."""
    _check_tau(tau)
    return ad.softmax(ad.scale(r, 1.0 / tau), axis=-1)


def hard_top_k(r, K: int) -> np.ndarray:
    """Binary mask (int8) of the ``K`` largest entries of ``r``, ties to the lowest index."""
    r = np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64)
    H = r.shape[-1]
    if not 1 <= K <= H:
        raise DomainError(f"K={K} outside [1, {H}]")
    mask = np.zeros(H, dtype=np.int8)
    mask[np.argsort(-r, kind="stable")[:K]] = 1
    return mask


def subset_probability_oracle(w, subset) -> float:
    """Exact probability that Gumbel top-K of ``w`` returns exactly ``subset``.

    Brute-force sum over the ``K!`` orders in which the subset could be drawn
    sequentially without replacement.
    """
    iota = importance(w)
    subset = sorted(int(j) for j in subset)
    K = len(subset)
    if K > MAX_ORACLE_K:
        raise ComplexityGuardError(f"K={K} exceeds enumeration guard of {MAX_ORACLE_K}")
    if len(set(subset)) != K or (K and not 0 <= subset[0] <= subset[-1] < iota.size):
        raise DomainError("subset must hold distinct valid head indices")
    Z = float(iota.sum())
    total = 0.0
    for order in itertools.permutations(subset):
        p, remaining = 1.0, Z
        for h in order:
            p *= iota[h] / remaining
            remaining -= iota[h]
        total += p
    return total


@dataclass
class GateVector:
    """Relaxed K-hot gate: ``g`` is the sum of the per-round relaxed one-hots."""

    g: Tensor
    K: int
    rounds: list[Tensor] = field(default_factory=list)
    saturated: bool = False

    @property
    def values(self) -> np.ndarray:
        return self.g.data


def soft_top_k(r, K: int, tau: float) -> GateVector:
    """Relaxed Gumbel top-K: K tempered softmax rounds with ``log(1 - g)`` suppression.

    ``r`` may be a Tensor (gradients flow through every round) or an array.
    """
    _check_tau(tau)
    r = r if isinstance(r, Tensor) else Tensor(r)
    H = r.shape[-1]
    if not 1 <= K <= H:
        raise DomainError(f"K={K} outside [1, {H}]")
    rounds: list[Tensor] = []
    saturated = False
    logits = r
    total = None
    for k in range(K):
        gk = gumbel_softmax(logits, tau)
        rounds.append(gk)
        total = gk if total is None else ad.add(total, gk)
        if k + 1 < K:
            keep = ad.sub(1.0, gk)
            if np.any(keep.data < LOG_FLOOR):
                saturated = True
            logits = ad.add(logits, ad.log(ad.clip_min(keep, LOG_FLOOR)))
    return GateVector(g=total, K=K, rounds=rounds, saturated=saturated)


@dataclass(frozen=True)
class TemperatureSchedule:
    """Log-linear cooldown from ``tau_ini`` to ``tau_end`` over ``n_cooldown`` steps."""

    tau_ini: float
    tau_end: float
    n_cooldown: int

    def __post_init__(self):
        if not (self.tau_ini >= self.tau_end > 0):
            raise DomainError("schedule needs tau_ini >= tau_end > 0")
        if self.n_cooldown < 1:
            raise DomainError("n_cooldown must be a positive integer")


# Appendix-style defaults: classifier column and encoder-decoder column
BERT_SCHEDULE = TemperatureSchedule(1000.0, 1e-8, 25000)
ENC_DEC_SCHEDULE = TemperatureSchedule(0.1, 1e-8, 15000)


def temperature_at(schedule: TemperatureSchedule, n: int) -> float:
    if n < 0:
        raise DomainError("step index must be non-negative")
    if n == 0:
        return schedule.tau_ini
    if n >= schedule.n_cooldown:
        return schedule.tau_end
    frac = n / schedule.n_cooldown
    log_ini = math.log(schedule.tau_ini)
    return math.exp(log_ini - frac * (log_ini - math.log(schedule.tau_end)))
