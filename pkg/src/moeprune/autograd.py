"""Tape-based reverse-mode autodiff over 2-D float64 arrays.

The op vocabulary is fixed and small: exactly the kinds the toy MoE model
needs, each with a hand-written backward rule (no general closures from user
code). Scalars are 1x1 matrices. Gradients accumulate across reuses of a Var;
training code builds a fresh tape per step, so there is nothing to zero.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError, InputError, ShapeError

__all__ = [
    "Tape",
    "Var",
    "record",
    "backward",
    "grad_check",
    "matmul",
    "add",
    "mul",
    "silu",
    "row_softmax",
    "rmsnorm",
    "gather_rows",
    "scatter_rows",
    "cross_entropy",
    "mse",
    "scale",
    "masked_assign",
]


class Var:
    """A matrix value on a tape, with a lazily allocated gradient buffer."""

    __slots__ = ("value", "_grad", "tape", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool = True):
        if value.ndim != 2:
            raise ShapeError(f"Var values must be 2-D, got shape {value.shape}")
        self.value = value
        self._grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape


class Tape:
    """Topologically ordered record of operations; backward visits each once."""

    def __init__(self):
        self.nodes: list[tuple[Var, Callable[[np.ndarray], None]]] = []

    def var(self, value) -> Var:
        """Register a leaf (parameter or input)."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        return Var(arr, self)

    def const(self, value) -> Var:
        """Register a constant leaf: no gradient is computed or stored for it,
        and subgraphs built only from constants are not recorded."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        return Var(arr, self, requires_grad=False)

    def _emit(self, value: np.ndarray, bwd: Callable[[np.ndarray], None], *operands: Var) -> Var:
        if not any(o.requires_grad for o in operands):
            return Var(value, self, requires_grad=False)
        out = Var(value, self)
        self.nodes.append((out, bwd))
        return out

    def backward(self, loss: Var) -> None:
        if loss.value.shape != (1, 1):
            raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.value.shape}")
        loss.grad[...] = 1.0
        for out, bwd in reversed(self.nodes):
            if out._grad is not None:
                bwd(out._grad)


def backward(loss: Var) -> None:
    loss.tape.backward(loss)


def _same_tape(*vs: Var) -> Tape:
    t = vs[0].tape
    for v in vs[1:]:
        if v.tape is not t:
            raise ContractError("operands live on different tapes")
    return t


def matmul(a: Var, b: Var, transpose_a: bool = False, transpose_b: bool = False) -> Var:
    t = _same_tape(a, b)
    av = a.value.T if transpose_a else a.value
    bv = b.value.T if transpose_b else b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} x {bv.shape}")
    out = av @ bv

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g @ bv.T
            a.grad[...] += ga.T if transpose_a else ga
        if b.requires_grad:
            gb = av.T @ g
            b.grad[...] += gb.T if transpose_b else gb

    return t._emit(out, bwd, a, b)


def add(a: Var, b: Var) -> Var:
    t = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"add shape mismatch: {a.value.shape} vs {b.value.shape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[...] += g
        if b.requires_grad:
            b.grad[...] += g

    return t._emit(a.value + b.value, bwd, a, b)


def mul(a: Var, b: Var) -> Var:
    """Elementwise product; b may be a (n,1) column broadcast over a's columns."""
    t = _same_tape(a, b)
    bshape = b.value.shape
    if bshape != a.value.shape and not (bshape == (a.value.shape[0], 1)):
        raise ShapeError(f"mul shape mismatch: {a.value.shape} vs {bshape}")

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.grad[...] += g * b.value
        if b.requires_grad:
            if bshape == a.value.shape:
                b.grad[...] += g * a.value
            else:
                b.grad[...] += (g * a.value).sum(axis=1, keepdims=True)

    return t._emit(a.value * b.value, bwd, a, b)


def silu(a: Var) -> Var:
    x = a.value
    sig = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))

    def bwd(g: np.ndarray) -> None:
        a.grad[...] += g * (sig * (1.0 + x * (1.0 - sig)))

    return a.tape._emit(x * sig, bwd, a)


def row_softmax(a: Var, mask: np.ndarray | None = None) -> Var:
    """Row-wise softmax; positions where mask==False get probability exactly 0.

    The mask is a constant (routing/causal structure), not a differentiable
    operand: it realizes Eq.-style "set non-selected logits to -inf" without
    materializing infinities.
    """
    x = a.value
    if mask is None:
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    else:
        if mask.shape != x.shape:
            raise ShapeError(f"softmax mask shape {mask.shape} != logits shape {x.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("softmax mask leaves an empty row")
        masked = np.where(mask, x, -np.inf)
        shifted = x - masked.max(axis=1, keepdims=True)
        with np.errstate(over="ignore"):
            e = np.where(mask, np.exp(shifted), 0.0)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g: np.ndarray) -> None:
        dot = (g * s).sum(axis=1, keepdims=True)
        a.grad[...] += s * (g - dot)

    return a.tape._emit(s, bwd, a)


def rmsnorm(a: Var, eps: float = 1e-5) -> Var:
    """Parameter-free RMS normalization per row: x / sqrt(mean(x^2) + eps)."""
    x = a.value
    n = x.shape[1]
    r = 1.0 / np.sqrt((x * x).mean(axis=1, keepdims=True) + eps)

    def bwd(g: np.ndarray) -> None:
        xg = (x * g).sum(axis=1, keepdims=True)
        a.grad[...] += r * (g - (r * r / n) * x * xg)

    return a.tape._emit(x * r, bwd, a)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """Select rows a[idx]; the embedding lookup and the expert-dispatch gather."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows needs a 1-D index, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        raise InputError(f"gather index out of range [0, {a.value.shape[0]})")

    def bwd(g: np.ndarray) -> None:
        np.add.at(a.grad, idx, g)

    return a.tape._emit(a.value[idx], bwd, a)


def scatter_rows(a: Var, idx: np.ndarray, n_rows: int) -> Var:
    """Place rows of a at positions idx of an (n_rows, d) zero matrix (duplicates add)."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.size != a.value.shape[0]:
        raise ShapeError(f"scatter index shape {idx.shape} != row count {a.value.shape[0]}")
    out = np.zeros((n_rows, a.value.shape[1]))
    np.add.at(out, idx, a.value)

    def bwd(g: np.ndarray) -> None:
        a.grad[...] += g[idx]

    return a.tape._emit(out, bwd, a)


def cross_entropy(logits: Var, targets: np.ndarray) -> Var:
    """Mean next-token cross-entropy (natural log) of logits rows vs targets."""
    targets = np.asarray(targets, dtype=np.intp)
    x = logits.value
    if targets.ndim != 1 or targets.size != x.shape[0]:
        raise ShapeError(f"targets length {targets.size} != logits rows {x.shape[0]}")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise InputError(f"target out of vocabulary range [0, {x.shape[1]})")
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    n = x.shape[0]
    loss = -logp[np.arange(n), targets].mean()

    def bwd(g: np.ndarray) -> None:
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        logits.grad[...] += (g[0, 0] / n) * p

    return logits.tape._emit(np.array([[loss]]), bwd, logits)


def mse(a: Var, b: Var) -> Var:
    """Mean squared error over all entries, (1/N) * sum((a-b)^2)."""
    t = _same_tape(a, b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"mse shape mismatch: {a.value.shape} vs {b.value.shape}")
    diff = a.value - b.value
    n = max(diff.size, 1)

    def bwd(g: np.ndarray) -> None:
        d = (2.0 * g[0, 0] / n) * diff
        if a.requires_grad:
            a.grad[...] += d
        if b.requires_grad:
            b.grad[...] -= d

    return t._emit(np.array([[(diff * diff).sum() / n]]), bwd, a, b)


def scale(a: Var, c: float) -> Var:
    c = float(c)

    def bwd(g: np.ndarray) -> None:
        a.grad[...] += c * g

    return a.tape._emit(c * a.value, bwd, a)


def masked_assign(a: Var, mask: np.ndarray) -> Var:
    """Zero both the value and the gradient flow wherever mask == 0."""
    if mask.shape != a.value.shape:
        raise ShapeError(f"mask shape {mask.shape} != value shape {a.value.shape}")
    m = mask.astype(np.float64)

    def bwd(g: np.ndarray) -> None:
        a.grad[...] += g * m

    return a.tape._emit(a.value * m, bwd, a)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "elementwise-multiply": mul,
    "silu": silu,
    "row_softmax": row_softmax,
    "rmsnorm": rmsnorm,
    "embedding-gather": gather_rows,
    "scatter-rows": scatter_rows,
    "cross-entropy": cross_entropy,
    "mean-squared-error": mse,
    "scalar-scale": scale,
    "masked-assign": masked_assign,
}


def record(kind: str, *operands, **attrs) -> Var:
    """Dispatch by op-kind name; the uniform entry point over the fixed vocabulary."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ShapeError(f"unsupported op kind {kind!r}; supported: {sorted(_OPS)}") from None
    return op(*operands, **attrs)


def grad_check(
    f: Callable[[Var], Var], x: np.ndarray, eps: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be a deterministic scalar-valued function of one matrix Var.
    Relative error per entry is |analytic - numeric| / max(1, |analytic|).
    """
    if not (0.0 < eps <= 1e-2):
        raise ContractError(f"eps must be in (0, 1e-2], got {eps}")
    x = np.asarray(x, dtype=np.float64)
    tape = Tape()
    xv = tape.var(x.copy())
    loss = f(xv)
    tape.backward(loss)
    analytic = xv.grad.copy()

    def eval_at(arr: np.ndarray) -> float:
        t = Tape()
        return float(f(t.var(arr)).value[0, 0])

    worst = 0.0
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        ij = it.multi_index
        xp = x.copy()
        xp[ij] += eps
        xm = x.copy()
        xm[ij] -= eps
        numeric = (eval_at(xp) - eval_at(xm)) / (2.0 * eps)
        a = analytic[ij]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
        it.iternext()
    return worst
