"""Float64 tensors with a reverse-mode gradient tape.

Everything downstream (encoders, scans, attention, experts) is built from
the primitives in this module.  Each primitive computes its value eagerly
with numpy and, when a :class:`GradientTape` is active, appends a record
holding the saved inputs and a vector-Jacobian product closure.  The
reverse pass walks the records once, back to front.

Gradient correctness is checked against central finite differences via
:func:`grad_check`; the numeric side never touches the tape.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shape mismatch between operands."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class NumericalError(ArithmeticError):
    """Non-finite value produced while finite checks are enabled."""


_FINITE_CHECK = False


def set_finite_check(enabled: bool) -> None:
    """Globally enable/disable per-op NaN/Inf detection (off by default)."""
    global _FINITE_CHECK
    _FINITE_CHECK = bool(enabled)


class Tensor:
    """Dense float64 array value.

    Tensors are immutable by convention once constructed and safe to share
    across threads; gradients come from a tape, not from the tensor.
    """

    __slots__ = ("data", "requires_grad", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._item_err()

    def _item_err(self):
        raise ContractError(f"item() requires a scalar tensor, got shape {self.shape}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # operator sugar; all routing through the module-level primitives
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


# ---------------------------------------------------------------------------
# tape


_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


class GradientTape:
    """Ordered, append-only record of primitive ops for one reverse pass.

    A tape is confined to the thread that opened it.  Ops record themselves
    only while a tape is active and only if one of their inputs is tracked
    (requires_grad or itself produced on this tape).  ``gradients`` may be
    called exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._watched: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("GradientTape exited out of order")
        stack.pop()
        return False

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._watched

    def __len__(self) -> int:
        return len(self._entries)

    def gradients(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Backpropagate from a scalar ``target`` to each of ``sources``.

        Returns one array per source, shaped like the source; sources the
        target does not depend on get zeros.
        """
        if self._consumed:
            raise ContractError("GradientTape already consumed; build a new tape")
        self._consumed = True
        if target.size != 1:
            raise ContractError(
                f"gradients target must be scalar, got shape {target.shape}"
            )
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for out, parents, vjp in reversed(self._entries):
            g = grads.get(id(out))
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not self._tracks(parent):
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
        return [
            grads.get(id(s), np.zeros_like(s.data)).reshape(s.shape) for s in sources
        ]


class stop_recording:
    """Context manager that hides any active tapes from ops inside it."""

    def __enter__(self):
        self._saved = getattr(_LOCAL, "stack", [])
        _LOCAL.stack = []
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _LOCAL.stack = self._saved
        return False


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _FINITE_CHECK and not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")
    out = Tensor(data, op=op)
    stack = _tape_stack()
    if stack:
        tape = stack[-1]
        if any(tape._tracks(p) for p in parents):
            tape._entries.append((out, parents, vjp))
            tape._watched.add(id(out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = _broadcast_op(np.add, a, b, "add")
    return _result(
        data,
        "add",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = _broadcast_op(np.subtract, a, b, "sub")
    return _result(
        data,
        "sub",
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = _broadcast_op(np.multiply, a, b, "mul")
    return _result(
        data,
        "mul",
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    data = _broadcast_op(np.divide, a, b, "div")
    return _result(
        data,
        "div",
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def _broadcast_op(fn, a: Tensor, b: Tensor, name: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"{name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from exc


def neg(a) -> Tensor:
    a = astensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = astensor(a)
    p = float(p)
    data = a.data**p
    return _result(data, "power", (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a) -> Tensor:
    a = astensor(a)
    data = np.exp(a.data)
    return _result(data, "exp", (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = astensor(a)
    return _result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    data = np.sqrt(a.data)
    return _result(data, "sqrt", (a,), lambda g: (g * 0.5 / data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = astensor(a)
    s = _sigmoid(a.data)
    return _result(
        a.data * s, "silu", (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),)
    )


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    a = astensor(a)
    data = np.logaddexp(0.0, a.data)
    return _result(data, "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul requires ndim >= 2 operands, got {a.shape} x {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(
            f"matmul batch dimensions do not broadcast: {a.shape} x {b.shape}"
        ) from exc

    def vjp(g):
        da = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return da, db

    return _result(data, "matmul", (a, b), vjp)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(
        np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),)
    )


def swap_last2(a) -> Tensor:
    a = astensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    shape = tuple(shape)
    return _result(
        a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),)
    )


def expand_dims(a, axis: int) -> Tensor:
    a = astensor(a)
    shape = list(a.shape)
    shape.insert(axis % (a.ndim + 1) if axis >= 0 else a.ndim + 1 + axis, 1)
    return reshape(a, shape)


def flip(a, axis: int) -> Tensor:
    a = astensor(a)
    return _result(
        np.flip(a.data, axis).copy(), "flip", (a,), lambda g: (np.flip(g, axis),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]}"
        ) from exc
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _result(data, "concat", tuple(ts), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    data = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0)[i] for i in range(len(ts)))

    return _result(data, "stack", tuple(ts), vjp)


def index_axis(a, axis: int, i: int) -> Tensor:
    """Select index ``i`` along ``axis``, dropping that axis."""
    a = astensor(a)
    data = np.take(a.data, i, axis=axis)
    key = [slice(None)] * a.ndim
    key[axis] = i
    key = tuple(key)

    def vjp(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _result(data, "index_axis", (a,), vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = astensor(a)
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    data = a.data[key].copy()

    def vjp(g):
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _result(data, "slice_axis", (a,), vjp)


# ---------------------------------------------------------------------------
# reductions


def _axis_tuple(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, "sum", (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _result(data, "mean", (a,), vjp)


# ---------------------------------------------------------------------------
# fused neural-net primitives


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax; the max subtraction is a constant shift."""
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - inner),)

    return _result(s, "softmax", (a,), vjp)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gamma, beta) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = astensor(x), astensor(gamma), astensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm affine params must have shape ({x.shape[-1]},), "
            f"got gamma {gamma.shape}, beta {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    data = gamma.data * xhat + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result(data, "layer_norm", (x, gamma, beta), vjp)


def conv1d(x, kernel, mode: str = "causal") -> Tensor:
    """Depthwise 1-D correlation along the second-to-last axis.

    ``x`` has shape (..., M, E) and ``kernel`` (K, E); each channel is
    convolved with its own length-K tap vector.  ``causal`` left-pads K-1
    zeros; ``same`` pads symmetrically.  Output length is always M.
    """
    x, kernel = astensor(x), astensor(kernel)
    if kernel.ndim != 2:
        raise DimensionError(f"conv1d kernel must be (K, E), got {kernel.shape}")
    k, e = kernel.shape
    if x.shape[-1] != e:
        raise DimensionError(
            f"conv1d channel mismatch: x {x.shape} vs kernel {kernel.shape}"
        )
    m = x.shape[-2]
    if mode == "causal":
        pad_left, pad_right = k - 1, 0
    elif mode == "same":
        pad_left = (k - 1) // 2
        pad_right = k - 1 - pad_left
    else:
        raise ContractError(f"conv1d mode must be 'causal' or 'same', got {mode!r}")
    pad = [(0, 0)] * (x.ndim - 2) + [(pad_left, pad_right), (0, 0)]
    xp = np.pad(x.data, pad)
    data = np.zeros(x.shape)
    for j in range(k):
        data += xp[..., j : j + m, :] * kernel.data[j]

    def vjp(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kernel.data)
        lead = tuple(range(g.ndim - 1))
        for j in range(k):
            dxp[..., j : j + m, :] += g * kernel.data[j]
            dk[j] = (g * xp[..., j : j + m, :]).sum(axis=lead)
        return dxp[..., pad_left : pad_left + m, :], dk

    return _result(data, "conv1d", (x, kernel), vjp)


def conv2d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Strided 2-D correlation in channels-last layout.

    ``x``: (..., H, W, Cin); ``w``: (Kh, Kw, Cin, Cout); optional bias (Cout,).
    """
    x, w = astensor(x), astensor(w)
    if w.ndim != 4:
        raise DimensionError(f"conv2d weight must be (Kh, Kw, Cin, Cout), got {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.ndim < 3 or x.shape[-1] != cin:
        raise DimensionError(
            f"conv2d input channels mismatch: x {x.shape} vs weight {w.shape}"
        )
    h, wd = x.shape[-3], x.shape[-2]
    s = int(stride)
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    ho = (hp - kh) // s + 1
    wo = (wp - kw) // s + 1
    pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(x.data, pad)
    out_shape = x.shape[:-3] + (ho, wo, cout)
    data = np.zeros(out_shape)
    for a in range(kh):
        for b in range(kw):
            sl = xp[..., a : a + (ho - 1) * s + 1 : s, b : b + (wo - 1) * s + 1 : s, :]
            data += sl @ w.data[a, b]
    parents: tuple[Tensor, ...]
    if bias is not None:
        bias = astensor(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias must be ({cout},), got {bias.shape}")
        data = data + bias.data
        parents = (x, w, bias)
    else:
        parents = (x, w)

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for a in range(kh):
            for b in range(kw):
                sl = xp[
                    ..., a : a + (ho - 1) * s + 1 : s, b : b + (wo - 1) * s + 1 : s, :
                ]
                dw[a, b] = sl.reshape(-1, cin).T @ g.reshape(-1, cout)
                dxp[
                    ..., a : a + (ho - 1) * s + 1 : s, b : b + (wo - 1) * s + 1 : s, :
                ] += g @ w.data[a, b].T
        dx = dxp[..., padding : padding + h, padding : padding + wd, :]
        if bias is not None:
            db = g.reshape(-1, cout).sum(axis=0)
            return dx, dw, db
        return dx, dw

    return _result(data, "conv2d", parents, vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy.  ``logits``: (B, J) or (J,); int labels."""
    logits = astensor(logits)
    lg = logits.data if logits.ndim == 2 else logits.data[None, :]
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, j = lg.shape
    if lab.shape != (n,):
        raise DimensionError(f"labels shape {lab.shape} does not match logits {lg.shape}")
    if lab.min() < 0 or lab.max() >= j:
        raise ContractError(f"labels must lie in [0, {j}), got range "
                            f"[{lab.min()}, {lab.max()}]")
    shifted = lg - lg.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    loss = -logp[np.arange(n), lab].mean()

    def vjp(g):
        probs = np.exp(logp)
        probs[np.arange(n), lab] -= 1.0
        dl = g * probs / n
        return (dl.reshape(logits.shape),)

    return _result(np.float64(loss), "cross_entropy", (logits,), vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Returns the max over coordinates of |analytic - numeric| scaled by
    max(1, |analytic|, |numeric|).
    """
    with GradientTape() as tape:
        y = f(x)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    analytic = tape.gradients(y, [x])[0].reshape(-1)
    base = x.data.reshape(-1)
    numeric = np.empty_like(base)
    with stop_recording():
        for i in range(base.size):
            bumped = base.copy()
            bumped[i] = base[i] + step
            fp = f(Tensor(bumped.reshape(x.shape))).item()
            bumped[i] = base[i] - step
            fm = f(Tensor(bumped.reshape(x.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * step)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if base.size else 0.0


def grad_check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    fraction: float = 1.0,
    rng: np.random.Generator | None = None,
) -> float:
    """Finite-difference check of ``f()`` against the gradients of ``params``.

    Perturbs parameter entries in place (restoring them afterwards), so it
    must not run concurrently with other users of the same tensors.  With
    ``fraction < 1`` a random subset of coordinates per tensor is checked.
    """
    with GradientTape() as tape:
        y = f()
    if y.size != 1:
        raise ContractError("grad_check_params requires a scalar-valued function")
    analytic = tape.gradients(y, list(params))
    worst = 0.0
    with stop_recording():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            idx = np.arange(flat.size)
            if fraction < 1.0:
                take = max(1, int(math.ceil(flat.size * fraction)))
                gen = rng if rng is not None else np.random.default_rng(0)
                idx = gen.choice(flat.size, size=take, replace=False)
            for i in idx:
                keep = flat[i]
                flat[i] = keep + step
                fp = f().item()
                flat[i] = keep - step
                fm = f().item()
                flat[i] = keep
                numeric = (fp - fm) / (2.0 * step)
                denom = max(1.0, abs(aflat[i]), abs(numeric))
                worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
