"""Reverse-mode autodiff on a recorded tape, with an activation ledger.

Each primitive declares the exact set of tensors its backward rule reads.
Those tensors are handed to the backward function and nothing else is, so
the ledger (which charges every saved tensor once, to the scope that saved it
first) measures precisely what a training step must keep alive between the
forward and backward pass.

Parameters (``is_param=True``) are resident for the whole run and are
accounted by the memory model, so the ledger never charges them.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from larslab import kernels

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
BASE_SCOPE = "base"

_ids = itertools.count(1)


class ShapeError(ValueError):
    """Operand shapes do not satisfy a primitive's shape rule."""

    def __init__(self, kind: str, dims: tuple, detail: str = ""):
        self.kind = kind
        self.dims = dims
        msg = f"{kind}: incompatible dimensions {dims[0]} vs {dims[1]}"
        super().__init__(msg + (f" ({detail})" if detail else ""))


class UnknownPrimitive(ValueError):
    pass


class ScopeError(RuntimeError):
    pass


class NonFiniteGradient(ArithmeticError):
    def __init__(self, index: int, where: str):
        self.index = index
        super().__init__(f"non-finite {where} at flat index {index}")


class Tensor:
    __slots__ = ("id", "data", "requires_grad", "is_param", "name")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None,
                 is_param: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (F32, F64):
            arr = arr.astype(F32)
        if arr.dtype not in (F32, F64):
            raise TypeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        self.id = next(_ids)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.is_param = is_param
        self.name = name

    @classmethod
    def parameter(cls, data, *, dtype=None, name=None, trainable=True) -> "Tensor":
        return cls(data, requires_grad=trainable, dtype=dtype, is_param=True, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def nbytes(self) -> int:
        return self.data.size * self.data.itemsize

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor#{self.id}{tag}(shape={list(self.shape)}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__


@dataclass
class TapeNode:
    op_kind: str
    input_ids: tuple
    output_id: int
    saved_ids: tuple
    scope: str
    saved: tuple = field(repr=False, default=())
    needs: tuple = field(repr=False, default=())
    ctx: dict = field(repr=False, default_factory=dict)
    backward_fn: Callable | None = field(repr=False, default=None)
    dtype: np.dtype = field(repr=False, default=F32)


@dataclass
class ActivationLedger:
    entries: dict  # tensor id -> (bytes, scope)
    scope_totals: dict
    peak_total: int

    @property
    def total(self) -> int:
        return sum(self.scope_totals.values())

    def bytes_for(self, scope: str) -> int:
        return self.scope_totals.get(scope, 0)

    def adapter_bytes(self) -> int:
        return sum(v for k, v in self.scope_totals.items() if k.startswith("adapter"))


class Tape:
    """Records primitives in execution order and keeps the live ledger."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._scopes: list[str] = []
        self._entries: dict[int, tuple[int, str]] = {}
        self._scope_totals: dict[str, int] = {}
        self._total = 0
        self._peak = 0

    @property
    def current_scope(self) -> str:
        return self._scopes[-1] if self._scopes else BASE_SCOPE

    def push_scope(self, label: str) -> None:
        self._scopes.append(label)

    def pop_scope(self) -> str:
        if not self._scopes:
            raise ScopeError("pop_scope on an empty scope stack")
        return self._scopes.pop()

    @contextmanager
    def scope(self, label: str):
        self.push_scope(label)
        try:
            yield
        finally:
            self.pop_scope()

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        for t in node.saved:
            if t.is_param or t.id in self._entries:
                continue
            self._entries[t.id] = (t.nbytes, node.scope)
            self._scope_totals[node.scope] = self._scope_totals.get(node.scope, 0) + t.nbytes
            self._total += t.nbytes
            self._peak = max(self._peak, self._total)

    def ledger_snapshot(self) -> ActivationLedger:
        return ActivationLedger(dict(self._entries), dict(self._scope_totals), self._peak)

    def reset(self) -> None:
        self.__init__()

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack[-1] is self:
            stack.pop()


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    return _stack()[-1]


def push_scope(label: str) -> None:
    current_tape().push_scope(label)


def pop_scope() -> str:
    return current_tape().pop_scope()


def scope(label: str):
    return current_tape().scope(label)


def ledger_snapshot() -> ActivationLedger:
    return current_tape().ledger_snapshot()


# --------------------------------------------------------------------------
# shape helpers
# --------------------------------------------------------------------------

def _check_broadcast(kind: str, sa: tuple, sb: tuple) -> None:
    for x, y in zip(reversed(sa), reversed(sb)):
        if x != y and x != 1 and y != 1:
            raise ShapeError(kind, (x, y))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axis(axis: int, ndim: int, kind: str) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(kind, (axis, ndim), "axis out of range")
    return axis % ndim


def _as_rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1))


# --------------------------------------------------------------------------
# primitives: forward returns (out, save, ctx); save lists input indices,
# "out", or freshly computed auxiliary arrays
# --------------------------------------------------------------------------

def _matmul_fwd(xs, **_):
    a, b = xs
    if a.ndim < 2 or b.ndim < 1:
        raise ShapeError("matmul", (a.ndim, b.ndim), "left operand must be at least 2-D")
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.shape[-1] != k_b:
        raise ShapeError("matmul", (a.shape[-1], k_b), "inner dimensions")
    if b.ndim > 2:
        _check_broadcast("matmul", a.shape[:-2], b.shape[:-2])
    return np.matmul(a, b), (0, 1), {}


def _matmul_bwd(g, saved, ctx, needs):
    a, b = saved
    ga = gb = None
    k = a.shape[-1]
    if b.ndim == 1:
        if needs[0]:
            ga = g[..., None] * b
        if needs[1]:
            gb = a.reshape(-1, k).T @ g.reshape(-1)
        return [ga, gb]
    if needs[0]:
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        if b.ndim == 2:
            gb = a.reshape(-1, k).T @ g.reshape(-1, b.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return [ga, gb]


def _add_fwd(xs, **_):
    a, b = xs
    _check_broadcast("add", a.shape, b.shape)
    return a + b, (), {"shapes": (a.shape, b.shape)}


def _add_bwd(g, saved, ctx, needs):
    sa, sb = ctx["shapes"]
    return [_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(g, sb) if needs[1] else None]


def _sub_fwd(xs, **_):
    a, b = xs
    _check_broadcast("sub", a.shape, b.shape)
    return a - b, (), {"shapes": (a.shape, b.shape)}


def _sub_bwd(g, saved, ctx, needs):
    sa, sb = ctx["shapes"]
    return [_unbroadcast(g, sa) if needs[0] else None, _unbroadcast(-g, sb) if needs[1] else None]


def _mul_fwd(xs, **_):
    a, b = xs
    _check_broadcast("mul", a.shape, b.shape)
    return a * b, (0, 1), {}


def _mul_bwd(g, saved, ctx, needs):
    a, b = saved
    return [_unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None]


def _scalar_mul_fwd(xs, c=None, **_):
    if len(xs) == 1:
        if c is None:
            raise ValueError("scalar_mul needs a constant c or a scalar tensor input")
        return xs[0] * c, (), {"c": float(c)}
    x, s = xs
    if s.size != 1:
        raise ShapeError("scalar_mul", (s.size, 1), "scalar operand must have one element")
    # the scalar's value rides in ctx; only the non-scalar operand is saved
    return x * s.reshape(()), (0,), {"s": s.reshape(()).copy(), "s_shape": s.shape}


def _scalar_mul_bwd(g, saved, ctx, needs):
    if "c" in ctx:
        return [g * ctx["c"]]
    (x,) = saved
    gx = g * ctx["s"] if needs[0] else None
    gs = np.sum(g * x).reshape(ctx["s_shape"]) if needs[1] else None
    return [gx, gs]


def _mean_fwd(xs, axis=0, **_):
    (x,) = xs
    ax = _norm_axis(axis, x.ndim, "mean_over_axis")
    return x.mean(axis=ax), (), {"axis": ax, "shape": x.shape}


def _mean_bwd(g, saved, ctx, needs):
    ax, shape = ctx["axis"], ctx["shape"]
    return [np.broadcast_to(np.expand_dims(g, ax), shape) / shape[ax]]


def _sum_fwd(xs, axis=None, **_):
    (x,) = xs
    ax = None if axis is None else _norm_axis(axis, x.ndim, "sum_over_axis")
    return np.asarray(x.sum(axis=ax)), (), {"axis": ax, "shape": x.shape}


def _sum_bwd(g, saved, ctx, needs):
    ax, shape = ctx["axis"], ctx["shape"]
    if ax is None:
        return [np.broadcast_to(g, shape)]
    return [np.broadcast_to(np.expand_dims(g, ax), shape)]


def _select_fwd(xs, index=0, axis=0, **_):
    (x,) = xs
    ax = _norm_axis(axis, x.ndim, "select_index")
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("select_index needs integer indices")
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise ShapeError("select_index", (int(idx.max()), x.shape[ax]), "index out of range")
    out = np.ascontiguousarray(np.take(x, idx, axis=ax))
    return out, (), {"axis": ax, "index": idx, "shape": x.shape, "dtype": x.dtype}


def _select_bwd(g, saved, ctx, needs):
    ax, idx = ctx["axis"], ctx["index"]
    gx = np.zeros(ctx["shape"], dtype=ctx["dtype"])
    view = np.moveaxis(gx, ax, 0)
    gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
    np.add.at(view, idx, gm)
    return [gx]


def _sigmoid_fwd(xs, **_):
    return expit(xs[0]), ("out",), {}


def _sigmoid_bwd(g, saved, ctx, needs):
    (y,) = saved
    return [g * y * (1 - y)]


def _gelu_fwd(xs, **_):
    (x,) = xs
    return kernels.gelu_forward(_as_rows(x)).reshape(x.shape), (0,), {}


def _gelu_bwd(g, saved, ctx, needs):
    (x,) = saved
    return [kernels.gelu_backward(_as_rows(x), _as_rows(g)).reshape(x.shape)]


def _softmax_fwd(xs, axis=-1, **_):
    (x,) = xs
    ax = _norm_axis(axis, x.ndim, "softmax_over_axis")
    moved = np.moveaxis(x, ax, -1)
    y = kernels.softmax_forward(_as_rows(moved)).reshape(moved.shape)
    return np.ascontiguousarray(np.moveaxis(y, -1, ax)), ("out",), {"axis": ax}


def _softmax_bwd(g, saved, ctx, needs):
    (y,) = saved
    ax = ctx["axis"]
    ym, gm = np.moveaxis(y, ax, -1), np.moveaxis(g, ax, -1)
    gx = kernels.softmax_backward(_as_rows(ym), _as_rows(gm)).reshape(ym.shape)
    return [np.moveaxis(gx, -1, ax)]


def _layer_norm_fwd(xs, eps=1e-5, **_):
    (x,) = xs
    y, mean, var = kernels.layer_norm_forward(_as_rows(x), eps)
    lead = x.shape[:-1]
    return y.reshape(x.shape), (0, mean.reshape(lead), var.reshape(lead)), {"eps": eps}


def _layer_norm_bwd(g, saved, ctx, needs):
    x, mean, var = saved
    gx = kernels.layer_norm_backward(_as_rows(x), mean.reshape(-1), var.reshape(-1),
                                     _as_rows(g), ctx["eps"])
    return [gx.reshape(x.shape)]


def _broadcast_fwd(xs, axis=1, size=1, **_):
    (x,) = xs
    if size < 1:
        raise ShapeError("broadcast_over_axis", (size, 1), "size must be positive")
    ax = _norm_axis(axis, x.ndim + 1, "broadcast_over_axis")
    out = np.repeat(np.expand_dims(x, ax), size, axis=ax)
    return out, (), {"axis": ax}


def _broadcast_bwd(g, saved, ctx, needs):
    return [g.sum(axis=ctx["axis"])]


def _transpose_fwd(xs, axes=None, **_):
    (x,) = xs
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError("transpose", (len(axes), x.ndim), "axes must be a permutation")
    return np.ascontiguousarray(np.transpose(x, axes)), (), {"inv": tuple(np.argsort(axes))}


def _transpose_bwd(g, saved, ctx, needs):
    return [np.transpose(g, ctx["inv"])]


def _reshape_fwd(xs, shape=(), **_):
    (x,) = xs
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", (x.size, tuple(shape)), "element count") from None
    return out, (), {"shape": x.shape}


def _reshape_bwd(g, saved, ctx, needs):
    return [g.reshape(ctx["shape"])]


def _cross_entropy_fwd(xs, targets=None, **_):
    (logits,) = xs
    t = np.asarray(targets)
    if logits.ndim != 2 or t.shape != logits.shape[:1]:
        raise ShapeError("cross_entropy", (logits.shape, t.shape), "expects [N,C] logits and [N] targets")
    probs = kernels.softmax_forward(np.ascontiguousarray(logits))
    m = logits.max(axis=-1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    loss = np.mean(logz - logits[np.arange(len(t)), t])
    return np.asarray(loss, dtype=logits.dtype), (probs,), {"targets": t}


def _cross_entropy_bwd(g, saved, ctx, needs):
    (p,) = saved
    t = ctx["targets"]
    gx = p.copy()
    gx[np.arange(len(t)), t] -= 1
    return [gx * (g / len(t))]


_PRIMITIVES = {
    "matmul": (_matmul_fwd, _matmul_bwd),
    "add": (_add_fwd, _add_bwd),
    "sub": (_sub_fwd, _sub_bwd),
    "mul": (_mul_fwd, _mul_bwd),
    "scalar_mul": (_scalar_mul_fwd, _scalar_mul_bwd),
    "mean_over_axis": (_mean_fwd, _mean_bwd),
    "sum_over_axis": (_sum_fwd, _sum_bwd),
    "select_index": (_select_fwd, _select_bwd),
    "sigmoid": (_sigmoid_fwd, _sigmoid_bwd),
    "gelu": (_gelu_fwd, _gelu_bwd),
    "softmax_over_axis": (_softmax_fwd, _softmax_bwd),
    "layer_norm": (_layer_norm_fwd, _layer_norm_bwd),
    "broadcast_over_axis": (_broadcast_fwd, _broadcast_bwd),
    "transpose": (_transpose_fwd, _transpose_bwd),
    # not in the core list; both are needed by the backbone and the loss
    "reshape": (_reshape_fwd, _reshape_bwd),
    "cross_entropy": (_cross_entropy_fwd, _cross_entropy_bwd),
}

PRIMITIVE_KINDS = tuple(_PRIMITIVES)


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one primitive, record it on the current tape and return its output."""
    try:
        fwd, bwd = _PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitive(f"unknown primitive kind {kind!r}") from None
    inputs = list(inputs)
    if not inputs or not all(isinstance(t, Tensor) for t in inputs):
        raise TypeError(f"{kind}: inputs must be a non-empty list of Tensor")
    dtype = inputs[0].dtype
    if any(t.dtype != dtype for t in inputs):
        raise TypeError(f"{kind}: mixed dtypes {[str(t.dtype) for t in inputs]}")

    out_data, save, ctx = fwd([t.data for t in inputs], **attrs)
    out = Tensor(np.asarray(out_data, dtype=dtype),
                 requires_grad=any(t.requires_grad for t in inputs))
    saved = []
    for s in save:
        if isinstance(s, str):
            saved.append(out)
        elif isinstance(s, int):
            saved.append(inputs[s])
        else:
            saved.append(Tensor(np.asarray(s, dtype=dtype)))
    tape = current_tape()
    tape.record(TapeNode(
        op_kind=kind,
        input_ids=tuple(t.id for t in inputs),
        output_id=out.id,
        saved_ids=tuple(t.id for t in saved),
        scope=tape.current_scope,
        saved=tuple(saved),
        needs=tuple(t.requires_grad for t in inputs),
        ctx=ctx,
        backward_fn=bwd,
        dtype=dtype,
    ))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Gradients of ``loss`` for every tensor on the tape with requires_grad."""
    tape = tape or current_tape()
    if loss.size != 1:
        raise ValueError(f"loss must be scalar-shaped, got shape {list(loss.shape)}")
    if not tape.nodes:
        raise ValueError("backward on an empty tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.output_id)
        if g is None or not any(node.needs):
            continue
        in_grads = node.backward_fn(g, [t.data for t in node.saved], node.ctx, node.needs)
        for iid, need, gi in zip(node.input_ids, node.needs, in_grads):
            if not need or gi is None:
                continue
            gi = np.asarray(gi, dtype=node.dtype)
            prev = grads.get(iid)
            grads[iid] = gi if prev is None else prev + gi
    if not loss.requires_grad:
        grads.pop(loss.id, None)
    return grads


def _scalar_eval(f: Callable[[], Tensor]) -> float:
    with Tape():
        return float(np.asarray(f().data).reshape(-1)[0])


def finite_diff_gradcheck(f: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences for ``param``.

    ``f`` rebuilds the computation from the current parameter values and
    returns a scalar. Per element the error is |d| / (|g| + |d| + 1e-12) where
    g is the autodiff gradient and d the finite-difference minus autodiff gap.
    """
    if param.dtype != F64:
        raise ValueError("gradcheck requires float64 tensors")
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    with Tape() as tape:
        loss = f()
        grads = backward(loss, tape)
    g_ad = grads.get(param.id, np.zeros_like(param.data)).reshape(-1)
    bad = np.flatnonzero(~np.isfinite(g_ad))
    if bad.size:
        raise NonFiniteGradient(int(bad[0]), "autodiff gradient")

    flat = param.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _scalar_eval(f)
        flat[i] = orig - eps
        f_minus = _scalar_eval(f)
        flat[i] = orig
        fd = (f_plus - f_minus) / (2 * eps)
        if not np.isfinite(fd):
            raise NonFiniteGradient(i, "finite difference")
        gap = abs(fd - g_ad[i])
        worst = max(worst, gap / (abs(g_ad[i]) + gap + 1e-12))
    return worst


# --------------------------------------------------------------------------
# convenience wrappers
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scalar_mul(x: Tensor, c: float | Tensor) -> Tensor:
    if isinstance(c, Tensor):
        return apply_primitive("scalar_mul", [x, c])
    return apply_primitive("scalar_mul", [x], c=c)


def mean_over_axis(x: Tensor, axis: int) -> Tensor:
    return apply_primitive("mean_over_axis", [x], axis=axis)


def sum_over_axis(x: Tensor, axis: int | None = None) -> Tensor:
    return apply_primitive("sum_over_axis", [x], axis=axis)


def select_index(x: Tensor, index, axis: int = 0) -> Tensor:
    return apply_primitive("select_index", [x], index=index, axis=axis)


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", [x])


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax_over_axis", [x], axis=axis)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return apply_primitive("layer_norm", [x], eps=eps)


def broadcast_over_axis(x: Tensor, axis: int, size: int) -> Tensor:
    return apply_primitive("broadcast_over_axis", [x], axis=axis, size=size)


def transpose(x: Tensor, axes: Iterable[int] | None = None) -> Tensor:
    return apply_primitive("transpose", [x], axes=None if axes is None else tuple(axes))


def reshape(x: Tensor, shape: Iterable[int]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    return apply_primitive("cross_entropy", [logits], targets=targets)
