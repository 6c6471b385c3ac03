"""Multitask balancing objectives over per-task token log-probabilities.

Five ways to reduce a step's log-probs into a scalar loss:

  token_balanced   per-task mean CE over valid tokens, averaged across tasks
  sample_balanced  per-sample mean CE, per-task mean, averaged across tasks
  focal_sample     sample-level focal modulation (1 - P_ij)^gamma
  focal_task       task-level focal modulation (1 - P_i)^gamma
  famo             token_balanced terms reweighted by softmax task weights that
                   track relative validation-loss improvement rates

All losses consume a TaskBatchView of 1-D log-prob tensors and stay inside the
autodiff graph, so gradients flow back to the logits that produced them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T

LOSS_KINDS = ("token_balanced", "sample_balanced", "focal_sample", "focal_task", "famo")


@dataclass
class TaskBatchView:
    """Per-task lists of per-sample log-prob vectors (each 1-D, values <= 0)."""

    per_task: dict[int, list[T.Tensor]]

    def __post_init__(self):
        if not self.per_task:
            raise ValueError("TaskBatchView: no tasks")
        for tid, samples in self.per_task.items():
            if not samples:
                raise ValueError(f"TaskBatchView: task {tid} has no samples")
            for lp in samples:
                if lp.data.ndim != 1 or lp.data.shape[0] < 1:
                    raise ValueError(f"TaskBatchView: task {tid} sample must be a non-empty 1-D vector")

    @property
    def n_tasks(self) -> int:
        return len(self.per_task)

    def task_ids(self) -> list[int]:
        return list(self.per_task)


@dataclass
class FocalParams:
    alpha: dict[int, float] | None = None  # None = 1.0 for every task
    gamma: float = 2.0
    prob_floor: float = 1e-12

    def alpha_for(self, task_id: int) -> float:
        a = 1.0 if self.alpha is None else self.alpha.get(task_id, 1.0)
        if a <= 0:
            raise ValueError(f"alpha for task {task_id} must be positive")
        return a


def _neg_sum_logprobs(samples: list[T.Tensor]) -> T.Tensor:
    total = T.tsum(samples[0])
    for lp in samples[1:]:
        total = T.add(total, T.tsum(lp))
    return T.scale(total, -1.0)


def loss_token_balanced(view: TaskBatchView, weights: dict[int, float] | None = None) -> T.Tensor:
    """Per task: sum of -logp over valid tokens / token count; then a weighted
    average across tasks (uniform 1/N unless explicit weights are given)."""
    terms = None
    for tid, samples in view.per_task.items():
        tokens = sum(lp.data.shape[0] for lp in samples)
        term = T.scale(_neg_sum_logprobs(samples), 1.0 / tokens)
        w = (1.0 / view.n_tasks) if weights is None else weights[tid]
        term = T.scale(term, w)
        terms = term if terms is None else T.add(terms, term)
    return terms


def loss_plain_ce(view: TaskBatchView) -> T.Tensor:
    """Mean CE over all valid tokens with task identity ignored (the N=1 collapse)."""
    pooled = [lp for samples in view.per_task.values() for lp in samples]
    return loss_token_balanced(TaskBatchView({0: pooled}))


def loss_sample_balanced(view: TaskBatchView) -> T.Tensor:
    terms = None
    for samples in view.per_task.values():
        task_term = None
        for lp in samples:
            ce = T.scale(T.tmean(lp), -1.0)
            task_term = ce if task_term is None else T.add(task_term, ce)
        task_term = T.scale(task_term, 1.0 / (len(samples) * view.n_tasks))
        terms = task_term if terms is None else T.add(terms, task_term)
    return terms


def _sample_p_q(lp: T.Tensor, params: FocalParams) -> tuple[T.Tensor, T.Tensor]:
    """(P, Q) for one sample: mean clamped probability, mean log-probability."""
    clamped = T.clamp(lp, lo=math.log(params.prob_floor), hi=0.0)
    p = T.tmean(T.exp(clamped))
    q = T.tmean(lp)
    return p, q


def _focal_term(p: T.Tensor, q: T.Tensor, alpha: float, gamma: float) -> T.Tensor:
    one_minus_p = T.add(T.Tensor(1.0), T.scale(p, -1.0))
    modulator = T.pow_const(one_minus_p, gamma)
    return T.scale(T.mul(modulator, q), -alpha)


def loss_focal_sample(view: TaskBatchView, params: FocalParams | None = None) -> T.Tensor:
    params = params or FocalParams()
    total = None
    n_samples = 0
    for tid, samples in view.per_task.items():
        alpha = params.alpha_for(tid)
        n_samples += len(samples)
        for lp in samples:
            p, q = _sample_p_q(lp, params)
            term = _focal_term(p, q, alpha, params.gamma)
            total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / n_samples)


def loss_focal_task(view: TaskBatchView, params: FocalParams | None = None) -> T.Tensor:
    params = params or FocalParams()
    total = None
    for tid, samples in view.per_task.items():
        alpha = params.alpha_for(tid)
        p_i = None
        q_i = None
        for lp in samples:
            p, q = _sample_p_q(lp, params)
            p_i = p if p_i is None else T.add(p_i, p)
            q_i = q if q_i is None else T.add(q_i, q)
        p_i = T.scale(p_i, 1.0 / len(samples))
        q_i = T.scale(q_i, 1.0 / len(samples))
        term = _focal_term(p_i, q_i, alpha, params.gamma)
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / view.n_tasks)


# --- convergence-speed balancing (FAMO-style) ------------------------------


@dataclass
class FamoState:
    """Softmax-parameterized task weights driven by validation-loss improvement.

    Tasks whose log validation loss drops slowest gain weight: the logit update
    is a descent step on the weighted improvement sum(w_i * delta_i), pushed
    through the softmax Jacobian, followed by a decay of the logits toward 0.
    """

    task_ids: tuple[int, ...]
    logits: np.ndarray = None
    weight_lr: float = 0.025
    decay: float = 1e-3
    eps: float = 1e-8

    def __post_init__(self):
        if self.logits is None:
            self.logits = np.zeros(len(self.task_ids), dtype=np.float64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (len(self.task_ids),):
            raise ValueError("FamoState: logits shape must match task count")


def famo_weights(state: FamoState) -> dict[int, float]:
    z = state.logits - state.logits.max()
    e = np.exp(z)
    w = e / e.sum()
    return {tid: float(w[i]) for i, tid in enumerate(state.task_ids)}


def famo_update(
    state: FamoState,
    val_losses_prev: dict[int, float],
    val_losses_curr: dict[int, float],
) -> FamoState:
    """One weight update from consecutive per-task validation losses."""
    prev = np.array([val_losses_prev[tid] for tid in state.task_ids], dtype=np.float64)
    curr = np.array([val_losses_curr[tid] for tid in state.task_ids], dtype=np.float64)
    if not (np.all(np.isfinite(prev)) and np.all(np.isfinite(curr))):
        raise ValueError("famo_update: losses must be finite")
    if np.any(prev < 0) or np.any(curr < 0):
        raise ValueError("famo_update: losses must be non-negative")

    delta = np.log(prev + state.eps) - np.log(curr + state.eps)
    w = np.array([famo_weights(state)[tid] for tid in state.task_ids])
    # d/dxi of sum_i w_i(xi) * delta_i, via the softmax Jacobian diag(w) - w w^T
    grad = w * (delta - float(w @ delta))
    logits = (state.logits - state.weight_lr * grad) * (1.0 - state.decay)
    return replace(state, logits=logits)


def compute_loss(
    kind: str,
    view: TaskBatchView,
    focal: FocalParams | None = None,
    famo_task_weights: dict[int, float] | None = None,
) -> T.Tensor:
    if kind == "token_balanced":
        return loss_token_balanced(view)
    if kind == "sample_balanced":
        return loss_sample_balanced(view)
    if kind == "focal_sample":
        return loss_focal_sample(view, focal)
    if kind == "focal_task":
        return loss_focal_task(view, focal)
    if kind == "famo":
        if famo_task_weights is None:
            raise ValueError("famo loss requires task weights")
        present = {tid: famo_task_weights[tid] for tid in view.task_ids()}
        norm = sum(present.values())
        weights = {tid: w / norm for tid, w in present.items()}
        return loss_token_balanced(view, weights=weights)
    raise ValueError(f"unknown loss kind {kind!r}")
