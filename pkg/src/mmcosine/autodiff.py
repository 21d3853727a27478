"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable computation goes through :func:`apply`, which evaluates
one :class:`OpKind` and, when any input requires a gradient, appends a record
to a :class:`Tape`.  Tapes are attached to the tensors they produce, so two
independent forward passes never share state.  :func:`backward` replays a
tape in reverse once and then marks it consumed.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class OpKind(enum.Enum):
    MATMUL = "MatMul"
    ADD = "Add"
    MUL = "ElementwiseMul"
    RELU = "ReLU"
    SIGMOID = "Sigmoid"
    CONCAT = "ConcatLastAxis"
    L2_NORMALIZE_ROWS = "L2NormalizeRows"
    SCALE = "ScaleByConstant"
    SOFTMAX_CE = "SoftmaxCrossEntropy"
    TRANSPOSE = "Transpose"
    SUM = "Sum"


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("_tape", "grad", "name", "requires_grad", "values")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.values.copy())

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return apply(OpKind.MATMUL, [self, other])

    def __add__(self, other: Tensor) -> Tensor:
        return apply(OpKind.ADD, [self, other])

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return apply(OpKind.MUL, [self, other])
        return apply(OpKind.SCALE, [self], {"factor": float(other)})

    __rmul__ = __mul__

    @property
    def T(self) -> Tensor:
        return apply(OpKind.TRANSPOSE, [self])


@dataclass
class Record:
    kind: OpKind
    inputs: list[Tensor]
    output: Tensor
    ctx: dict[str, Any]


@dataclass
class Tape:
    records: list[Record] = field(default_factory=list)
    consumed: bool = False

    def append(self, record: Record) -> None:
        if self.consumed:
            raise TapeError("cannot extend a tape that backward() already consumed")
        self.records.append(record)
        record.output._tape = self

    def absorb(self, other: Tape) -> None:
        # both tapes are topologically ordered and disjoint, so concatenation is too
        if other.consumed:
            raise TapeError("input tensor belongs to a consumed tape")
        for rec in other.records:
            rec.output._tape = self
        self.records.extend(other.records)
        other.records = []
        other.consumed = True


def _shape_error(kind: OpKind, a, b) -> ShapeError:
    return ShapeError(f"{kind.value}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _forward(kind: OpKind, xs: list[np.ndarray], attrs: dict) -> tuple[np.ndarray, dict]:
    if kind is OpKind.MATMUL:
        a, b = xs
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_error(kind, a.shape, b.shape)
        return a @ b, {}
    if kind is OpKind.ADD:
        a, b = xs
        if a.shape == b.shape:
            return a + b, {"broadcast": False}
        # bias-row broadcast: (N, n) + (n,)
        if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            return a + b, {"broadcast": True}
        raise _shape_error(kind, a.shape, b.shape)
    if kind is OpKind.MUL:
        a, b = xs
        if a.shape != b.shape:
            raise _shape_error(kind, a.shape, b.shape)
        return a * b, {}
    if kind is OpKind.RELU:
        (a,) = xs
        return np.maximum(a, 0.0), {}
    if kind is OpKind.SIGMOID:
        (a,) = xs
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out, {"out": out}
    if kind is OpKind.CONCAT:
        if len(xs) < 1:
            raise ShapeError("ConcatLastAxis: needs at least one input")
        lead = xs[0].shape[:-1]
        for x in xs[1:]:
            if x.shape[:-1] != lead:
                raise _shape_error(kind, xs[0].shape, x.shape)
        widths = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1), {"widths": widths}
    if kind is OpKind.L2_NORMALIZE_ROWS:
        (a,) = xs
        if a.ndim != 2:
            raise ShapeError(f"L2NormalizeRows: expected a 2-D input, got shape {a.shape}")
        eps = attrs.get("eps", NORM_EPS)
        norms = np.sqrt(np.sum(a * a, axis=1, keepdims=True))
        denom = np.maximum(norms, eps)
        out = a / denom
        return out, {"out": out, "denom": denom, "floored": norms <= eps}
    if kind is OpKind.SCALE:
        (a,) = xs
        return a * attrs["factor"], {}
    if kind is OpKind.SOFTMAX_CE:
        (z,) = xs
        labels = np.asarray(attrs["labels"], dtype=np.int64)
        if z.ndim != 2 or labels.shape != (z.shape[0],):
            raise ShapeError(
                f"SoftmaxCrossEntropy: logits shape {z.shape} vs labels shape {labels.shape}"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
            raise ValueError(f"SoftmaxCrossEntropy: label out of range [0, {z.shape[1]})")
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
        log_p = shifted - log_norm
        n = z.shape[0]
        loss = -np.mean(log_p[np.arange(n), labels])
        return np.asarray(loss), {"probs": np.exp(log_p), "labels": labels}
    if kind is OpKind.TRANSPOSE:
        (a,) = xs
        if a.ndim != 2:
            raise ShapeError(f"Transpose: expected a 2-D input, got shape {a.shape}")
        return a.T.copy(), {}
    if kind is OpKind.SUM:
        (a,) = xs
        return np.asarray(a.sum()), {}
    raise ValueError(f"unknown op kind {kind!r}")


def _backward(rec: Record, g: np.ndarray) -> list[np.ndarray]:
    kind, ctx = rec.kind, rec.ctx
    xs = [t.values for t in rec.inputs]
    if kind is OpKind.MATMUL:
        a, b = xs
        return [g @ b.T, a.T @ g]
    if kind is OpKind.ADD:
        if ctx["broadcast"]:
            return [g, g.sum(axis=0)]
        return [g, g]
    if kind is OpKind.MUL:
        a, b = xs
        return [g * b, g * a]
    if kind is OpKind.RELU:
        return [g * (xs[0] > 0)]
    if kind is OpKind.SIGMOID:
        s = ctx["out"]
        return [g * s * (1.0 - s)]
    if kind is OpKind.CONCAT:
        cuts = np.cumsum(ctx["widths"])[:-1]
        return np.split(g, cuts, axis=-1)
    if kind is OpKind.L2_NORMALIZE_ROWS:
        u, denom, floored = ctx["out"], ctx["denom"], ctx["floored"]
        radial = np.sum(g * u, axis=1, keepdims=True)
        dx = (g - np.where(floored, 0.0, radial * u)) / denom
        return [dx]
    if kind is OpKind.SCALE:
        return [g * rec.ctx["factor"]]
    if kind is OpKind.SOFTMAX_CE:
        probs, labels = ctx["probs"], ctx["labels"]
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return [d * (g / len(labels))]
    if kind is OpKind.TRANSPOSE:
        return [g.T]
    if kind is OpKind.SUM:
        return [np.full(xs[0].shape, float(g))]
    raise ValueError(f"unknown op kind {kind!r}")


def apply(kind: OpKind, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Evaluate one operation, recording it when any input requires a gradient.

    ``attrs`` carries op parameters: ``eps`` for L2NormalizeRows, ``factor``
    for ScaleByConstant, ``labels`` for SoftmaxCrossEntropy.
    """
    attrs = dict(attrs or {})
    inputs = [_as_tensor(x) for x in inputs]
    values, ctx = _forward(kind, [t.values for t in inputs], attrs)
    if kind is OpKind.SCALE:
        ctx["factor"] = attrs["factor"]
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=needs_grad)
    if not needs_grad:
        return out
    tape = None
    for t in inputs:
        if t._tape is None:
            continue
        if t._tape.consumed:
            raise TapeError(f"{kind.value}: input was produced on a consumed tape")
        if tape is None:
            tape = t._tape
        elif t._tape is not tape:
            tape.absorb(t._tape)
    if tape is None:
        tape = Tape()
    tape.append(Record(kind, inputs, out, ctx))
    return out


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar ``loss`` and consume its tape.

    Gradients accumulate into ``.grad`` of every leaf that requires one;
    intermediate tensors on the tape also receive their ``.grad`` so that
    e.g. the logit gradient can be inspected.
    """
    if loss.values.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward() on a tensor that does not require grad")
    tape = loss._tape
    seed = np.ones_like(loss.values)
    if tape is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if tape.consumed:
        raise TapeError("backward() called twice on the same tape")

    grads: dict[int, np.ndarray] = {id(loss): seed}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for t, dg in zip(rec.inputs, _backward(rec, g)):
            if not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + dg
            else:
                grads[key] = dg
    # whatever remains are leaves
    for rec in tape.records:
        for t in rec.inputs:
            g = grads.pop(id(t), None)
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g
    tape.consumed = True


def finite_diff_gradient(
    f: Callable[[Tensor], float], point: Tensor, h: float = 1e-5
) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    base = np.array(point.values, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = float(f(Tensor(plus.reshape(base.shape))))
        fm = float(f(Tensor(minus.reshape(base.shape))))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            coord = tuple(int(c) for c in np.unravel_index(i, base.shape)) if base.ndim else ()
            raise FloatingPointError(f"non-finite function value at coordinate {coord}")
        out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(base.shape))


def max_relative_error(a, b, atol: float = 1e-7) -> float:
    """Largest elementwise relative error, ignoring entries within ``atol``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    rel = np.where(diff <= atol, 0.0, diff / np.where(scale > 0, scale, 1.0))
    return float(rel.max()) if rel.size else 0.0


# thin functional wrappers used by the model code

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.MATMUL, [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.ADD, [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.MUL, [a, b])


def relu(a: Tensor) -> Tensor:
    return apply(OpKind.RELU, [a])


def sigmoid(a: Tensor) -> Tensor:
    return apply(OpKind.SIGMOID, [a])


def concat(*xs: Tensor) -> Tensor:
    return apply(OpKind.CONCAT, list(xs))


def l2_normalize_rows(a: Tensor, eps: float = NORM_EPS) -> Tensor:
    return apply(OpKind.L2_NORMALIZE_ROWS, [a], {"eps": eps})


def scale(a: Tensor, factor: float) -> Tensor:
    return apply(OpKind.SCALE, [a], {"factor": float(factor)})


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    return apply(OpKind.SOFTMAX_CE, [logits], {"labels": labels})


def transpose(a: Tensor) -> Tensor:
    return apply(OpKind.TRANSPOSE, [a])


def total(a: Tensor) -> Tensor:
    return apply(OpKind.SUM, [a])
