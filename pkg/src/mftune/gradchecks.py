"""Central-difference gradient verification for every op and every loss.

Each entry builds a scalar from leaf tensors; weighting by a fixed random
matrix keeps gradients non-degenerate (e.g. sum of softmax rows would be
constant). Run via the `gradcheck` CLI subcommand or the test suite.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import (
    FocalParams,
    TaskBatchView,
    loss_focal_sample,
    loss_focal_task,
    loss_sample_balanced,
    loss_token_balanced,
)

TOLERANCE = 1e-4


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng([tag, 2024])


def _weighted(x: T.Tensor, c: np.ndarray) -> T.Tensor:
    return T.tsum(T.mul(x, T.Tensor(c)))


def _view_leaves(rng) -> list[T.Tensor]:
    lengths = [3, 5, 2, 4, 1]
    return [T.Tensor(rng.uniform(-5.0, -0.1, size=n), requires_grad=True) for n in lengths]


def _as_view(leaves: list[T.Tensor]) -> TaskBatchView:
    return TaskBatchView({0: leaves[:2], 1: leaves[2:4], 2: leaves[4:]})


def op_checks() -> dict[str, float]:
    """Max-norm relative gradcheck error per op."""
    results: dict[str, float] = {}

    def run(name, fn, leaves):
        results[name] = T.gradcheck(fn, leaves)

    r = _rng(1)
    a = T.Tensor(r.normal(size=(4, 5)), requires_grad=True)
    b = T.Tensor(r.normal(size=(5, 3)), requires_grad=True)
    run("matmul", lambda x, y: T.tsum(T.matmul(x, y)), [a, b])

    r = _rng(2)
    c = r.normal(size=(4, 5))
    x = T.Tensor(r.normal(size=(4, 5)), requires_grad=True)
    y = T.Tensor(r.normal(size=(4, 5)), requires_grad=True)
    run("add", lambda u, v: _weighted(T.add(u, v), c), [x, y])
    run("mul", lambda u, v: _weighted(T.mul(u, v), c), [x, y])
    bias = T.Tensor(r.normal(size=5), requires_grad=True)
    run("add_bias", lambda u, v: _weighted(T.add(u, v), c), [x, bias])
    run("mul_bias", lambda u, v: _weighted(T.mul(u, v), c), [x, bias])

    r = _rng(3)
    x = T.Tensor(r.normal(size=(3, 4)), requires_grad=True)
    c = r.normal(size=(3, 4))
    run("scale", lambda u: T.tsum(T.scale(u, -1.7)), [x])
    run("exp", lambda u: _weighted(T.exp(u), c), [x])
    pos = T.Tensor(r.uniform(0.5, 3.0, size=(3, 4)), requires_grad=True)
    run("log", lambda u: _weighted(T.log(u), c), [pos])
    run("pow_const", lambda u: _weighted(T.pow_const(u, 2.5), c), [pos])
    away = T.Tensor(np.where(np.abs(x.data) < 0.1, 0.5, x.data), requires_grad=True)
    run("relu", lambda u: _weighted(T.relu(u), c), [away])
    spread = T.Tensor(r.uniform(-3, 3, size=(3, 4)) + np.where(r.uniform(size=(3, 4)) > 0.5, 4, -4), requires_grad=True)
    run("clamp", lambda u: _weighted(T.clamp(u, -2.0, 2.0), c), [spread])

    r = _rng(4)
    x = T.Tensor(r.normal(size=(4, 6)), requires_grad=True)
    c = r.normal(size=(4, 6))
    run("softmax", lambda u: _weighted(T.softmax(u, axis=-1), c), [x])
    run("softmax_axis0", lambda u: _weighted(T.softmax(u, axis=0), c), [x])
    run("log_softmax", lambda u: _weighted(T.log_softmax(u, axis=-1), c), [x])
    run("layer_norm", lambda u: _weighted(T.layer_norm(u), c), [x])

    r = _rng(5)
    emb = T.Tensor(r.normal(size=(7, 3)), requires_grad=True)
    idx = np.array([0, 3, 3, 6, 1])  # repeats exercise scatter-add
    c53 = r.normal(size=(5, 3))
    run("gather_rows", lambda u: _weighted(T.gather_rows(u, idx), c53), [emb])

    x = T.Tensor(r.normal(size=(3, 5)), requires_grad=True)
    c5 = r.normal(size=5)
    c3 = r.normal(size=3)
    run("transpose", lambda u: _weighted(T.transpose(u), c53), [x])
    run("reshape", lambda u: _weighted(T.reshape(u, (5, 3)), c53), [x])
    run("sum_all", lambda u: T.tsum(u), [x])
    run("sum_axis0", lambda u: _weighted(T.tsum(u, axis=0), c5), [x])
    run("sum_axis1", lambda u: _weighted(T.tsum(u, axis=1), c3), [x])
    run("mean_all", lambda u: T.tmean(u), [x])
    run("mean_axis1", lambda u: _weighted(T.tmean(u, axis=1), c3), [x])

    p1 = T.Tensor(r.normal(size=(2, 4)), requires_grad=True)
    p2 = T.Tensor(r.normal(size=(3, 4)), requires_grad=True)
    c54 = r.normal(size=(5, 4))
    run("concat", lambda u, v: _weighted(T.concat([u, v]), c54), [p1, p2])

    r = _rng(6)
    logits = T.Tensor(r.normal(size=(6, 9)), requires_grad=True)
    targets = r.integers(0, 9, size=6)
    mask = np.array([0, 1, 1, 0, 1, 1])
    cvec = r.normal(size=4)
    run(
        "masked_token_logprobs",
        lambda u: _weighted(T.masked_token_logprobs(u, targets, mask), cvec),
        [logits],
    )
    return results


def loss_checks() -> dict[str, float]:
    """Gradcheck each balancing loss through its log-prob leaves."""
    results: dict[str, float] = {}
    focal = FocalParams(gamma=2.0)

    def run(name, fn):
        leaves = _view_leaves(_rng(hash(name) % 1000))
        results[name] = T.gradcheck(lambda *ls: fn(_as_view(list(ls))), leaves)

    run("loss_token_balanced", lambda v: loss_token_balanced(v))
    run("loss_sample_balanced", lambda v: loss_sample_balanced(v))
    run("loss_focal_sample", lambda v: loss_focal_sample(v, focal))
    run("loss_focal_task", lambda v: loss_focal_task(v, focal))
    weights = {0: 0.5, 1: 0.3, 2: 0.2}
    run("loss_famo_weighted", lambda v: loss_token_balanced(v, weights=weights))
    return results


def full_suite() -> dict[str, float]:
    out = op_checks()
    out.update(loss_checks())
    return out
