"""Reverse-mode autodiff over dense numpy arrays.

Small op set, 64-bit by default, built for auditability: every op registers
an explicit backward rule and the whole set is covered by central-difference
gradcheck (see `gradcheck` / the `gradcheck` CLI subcommand).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense array node in an autodiff graph.

    `grad` is allocated iff `requires_grad`. Graphs are single-use: calling
    `backward` twice on the same root raises.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, dtype=DTYPE):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        if self._backward_done:
            raise RuntimeError("backward already called on this graph; rebuild it to differentiate again")
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar root, got shape {self.shape}")
        self._backward_done = True

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad = self.grad + np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def _from_op(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = np.zeros_like(data) if out.requires_grad else None
    out.op = op
    out._parents = tuple(p for p in parents if p.requires_grad)
    out._backward_fn = backward_fn if out.requires_grad else None
    out._backward_done = False
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary_shapes(op: str, a: Tensor, b: Tensor) -> bool:
    """Equal shapes, or b a row vector matching a's last axis. Returns True for the bias case."""
    if a.shape == b.shape:
        return False
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary_shapes("add", a, b)

    def bwd(g):
        _acc(a, g)
        _acc(b, g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g)

    return _from_op(a.data + b.data, "add", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary_shapes("mul", a, b)

    def bwd(g):
        _acc(a, g * b.data)
        gb = g * a.data
        _acc(b, gb.reshape(-1, b.shape[0]).sum(axis=0) if bias else gb)

    return _from_op(a.data * b.data, "mul", (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        _acc(a, g * c)

    return _from_op(a.data * c, "scale", (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} vs {b.shape}")

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _from_op(a.data @ b.data, "matmul", (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out_data)

    return _from_op(out_data, "exp", (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")

    def bwd(g):
        _acc(a, g / a.data)

    return _from_op(np.log(a.data), "log", (a,), bwd)


def pow_const(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if np.any(a.data < 0):
        raise ValueError("pow_const: negative base")

    def bwd(g):
        _acc(a, g * p * a.data ** (p - 1.0) if p != 0.0 else np.zeros_like(a.data))

    return _from_op(a.data**p, "pow_const", (a,), bwd)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    passthrough = np.ones_like(a.data)
    if lo is not None:
        passthrough *= a.data >= lo
    if hi is not None:
        passthrough *= a.data <= hi

    def bwd(g):
        _acc(a, g * passthrough)

    return _from_op(out_data, "clamp", (a,), bwd)


def relu(a: Tensor) -> Tensor:
    def bwd(g):
        _acc(a, g * (a.data > 0))

    return _from_op(np.maximum(a.data, 0.0), "relu", (a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        _acc(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    return _from_op(p, "softmax", (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def bwd(g):
        _acc(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _from_op(out_data, "log_softmax", (a,), bwd)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along axis 0 (embedding lookup, row slicing). Backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: index must be 1-D, got shape {idx.shape}")
    if a.data.ndim < 1:
        raise ShapeError(f"gather_rows: input must have rows, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {a.shape[0]} rows")

    def bwd(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, idx, g)

    return _from_op(a.data[idx], "gather_rows", (a,), bwd)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv

    def bwd(g):
        n = a.shape[-1]
        gy = g - g.mean(axis=-1, keepdims=True) - y * (g * y).sum(axis=-1, keepdims=True) / n
        _acc(a, gy * inv)

    return _from_op(y, "layer_norm", (a,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input")
    if axis != 0:
        raise ShapeError("concat: only axis 0 supported")
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, bounds[:-1], bounds[1:]):
            _acc(t, g[a:b])

    return _from_op(np.concatenate([t.data for t in tensors], axis=0), "concat", tuple(tensors), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D tensor, got shape {a.shape}")

    def bwd(g):
        _acc(a, g.T)

    return _from_op(a.data.T.copy(), "transpose", (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _acc(a, g.reshape(a.shape))

    return _from_op(a.data.reshape(shape), "reshape", (a,), bwd)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    def bwd(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).copy())
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _from_op(np.asarray(a.data.sum(axis=axis)), "sum", (a,), bwd)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis), 1.0 / n)


def masked_token_logprobs(logits: Tensor, targets, mask) -> Tensor:
    """Per-token log p(target) at mask=1 positions, in position order.

    Returns a 1-D tensor of length mask.sum(); reductions are left to the
    caller so loss variants control their own normalization.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    t, v = logits.shape if logits.data.ndim == 2 else (None, None)
    if t is None:
        raise ShapeError(f"masked_token_logprobs: logits must be [T, V], got {logits.shape}")
    if targets.shape != (t,) or mask.shape != (t,):
        raise ShapeError(
            f"masked_token_logprobs: targets {targets.shape} / mask {mask.shape} must match logits rows ({t},)"
        )
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("masked_token_logprobs: mask values must be 0/1")
    pos = np.flatnonzero(mask)
    if pos.size == 0:
        raise ValueError("masked_token_logprobs: mask selects no positions")
    tgt = targets[pos]
    if tgt.min() < 0 or tgt.max() >= v:
        raise IndexError(f"masked_token_logprobs: target id out of vocab range [0, {v})")

    rows = logits.data[pos]
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    out_data = shifted[np.arange(pos.size), tgt] - np.log(e.sum(axis=1))

    def bwd(g):
        if logits.requires_grad:
            gl = -g[:, None] * probs
            gl[np.arange(pos.size), tgt] += g
            if logits.grad is None:
                logits.grad = np.zeros_like(logits.data)
            np.add.at(logits.grad, pos, gl)

    return _from_op(out_data, "masked_token_logprobs", (logits,), bwd)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction, in place on param data."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def gradcheck(fn, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Max-norm relative error between analytic and central-difference gradients.

    fn maps the inputs to a scalar Tensor. Error per input is
    ||analytic - numeric||_inf / max(||numeric||_inf, 1e-4); returns the worst.
    """
    for t in inputs:
        t.zero_grad()
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError("gradcheck: fn must return a scalar")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            fm = float(fn(*inputs).data)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * h)
        denom = max(float(np.abs(numeric).max()), 1e-4)
        worst = max(worst, float(np.abs(a - numeric).max()) / denom)
    return worst
