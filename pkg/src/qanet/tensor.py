"""Dense tensors with reverse-mode automatic differentiation.

A numpy array carries the values; every differentiable operation records its
parents and a closure that maps the output gradient to parent gradients.
``backward`` walks the recorded graph once in reverse topological order.

Only the primitives the super-resolution model needs are provided.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an operation boundary."""


def set_default_dtype(dtype) -> None:
    """Select the scalar type for newly created tensors (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype}; use float64 or float32")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def no_grad():
    """Evaluate without recording a graph."""
    return _grad_mode(False)


def enable_grad():
    """Record graphs again, e.g. for a training step called from inside ``no_grad``."""
    return _grad_mode(True)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """An n-d array of real scalars with optional gradient tracking.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous array of the default dtype unless a
        float array of a supported dtype is given.
    requires_grad : bool
        Mark a leaf whose gradient should be accumulated by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _op: str = ""):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(_DEFAULT_DTYPE)
        if not np.all(np.isfinite(arr)):
            where = _op or "construction"
            raise NonFiniteError(f"non-finite value produced by {where}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = _parents
        self._backward = None
        self.op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        if value is not None and np.shape(value) != self.data.shape:
            raise ShapeError(f"gradient shape {np.shape(value)} != tensor shape {self.data.shape}")
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return reduce(self, axis, "sum", keepdims)
    def mean(self, axis=None, keepdims=False): return reduce(self, axis, "mean", keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
    def relu(self): return relu(self)
    def sigmoid(self): return sigmoid(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], op: str, grad_fn: Callable) -> Tensor:
    track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = grad_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), "mul", grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: divisor contains exact zeros")

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), "div", grad_fn)


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * s, (x,), "scale", lambda g: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return _make(out, (x,), "relu", lambda g: (g * (x.data > 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):   # overflow surfaces as NonFiniteError
        out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("log: argument must be strictly positive")
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def clamp_min(x, lo: float) -> Tensor:
    """``max(x, lo)``; the gradient is zero where the clamp is active."""
    x = as_tensor(x)
    active = x.data > lo
    return _make(np.where(active, x.data, lo).astype(x.dtype, copy=False), (x,), "clamp_min",
                 lambda g: (g * active,))


# -- shape manipulation -------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (g.transpose(inv),))


def swap_last(x) -> Tensor:
    """Transpose the last two axes."""
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


# -- reductions ---------------------------------------------------------------

def reduce(x, axes=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum or mean over ``axes`` (all axes when None)."""
    x = as_tensor(x)
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown reduction mode {mode!r}")
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(a % x.ndim for a in axes)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ValueError("reduce: empty reduction")
    out = x.data.sum(axis=axes, keepdims=keepdims)
    factor = 1.0
    if mode == "mean":
        factor = 1.0 / count
        out = out / count

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g * factor, x.shape).copy(),)

    return _make(out, (x,), mode, grad_fn)


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis with max-subtraction.

    The row sum is accumulated left to right so a scalar loop reproduces it
    bit for bit.
    """
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    total = e[..., 0:1].copy()
    for k in range(1, e.shape[-1]):
        total = total + e[..., k:k + 1]
    out = e / total

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), "softmax", grad_fn)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, n] @ b[..., n, p]``.

    The inner dimension is accumulated in index order with one multiply and
    one add per step, so the result does not depend on batch layout and a
    scalar loop reproduces it exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} not broadcastable") from None
    ad, bd = a.data, b.data
    out = ad[..., :, 0:1] * bd[..., 0:1, :]
    for k in range(1, ad.shape[-1]):
        out = out + ad[..., :, k:k + 1] * bd[..., k:k + 1, :]

    def grad_fn(g):
        if bd.ndim == 2:
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(out, (a, b), "matmul", grad_fn)


def conv2d(x, weight, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    x: (B, Cin, H, W); weight: (Cout, Cin, k, k) with k odd; bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    B, cin, H, W = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight {weight.shape})")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    pad = kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (B, Cin, H, W, k, k) -> (B*H*W, Cin*k*k)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, cin * kh * kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
        out = out + bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out.reshape(B, H, W, cout).transpose(0, 3, 1, 2))

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * H * W, cout)
        gw = (g2.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, H, W, cin, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, :, dy:dy + H, dx:dx + W] += gcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out, parents, "conv2d", grad_fn)


def pixel_shuffle(x, r: int) -> Tensor:
    """Rearrange (B, c*r*r, H, W) into (B, c, r*H, r*W)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"pixel_shuffle: expected 4-d input, got {x.shape}")
    B, ch, H, W = x.shape
    if ch % (r * r):
        raise ShapeError(f"pixel_shuffle: {ch} channels not divisible by r^2={r * r}")
    c = ch // (r * r)
    out = x.data.reshape(B, c, r, r, H, W).transpose(0, 1, 4, 2, 5, 3).reshape(B, c, H * r, W * r)

    def grad_fn(g):
        return (pixel_unshuffle_array(g, r),)

    return _make(np.ascontiguousarray(out), (x,), "pixel_shuffle", grad_fn)


def pixel_unshuffle_array(y: np.ndarray, r: int) -> np.ndarray:
    """Inverse rearrangement of :func:`pixel_shuffle` on a raw array."""
    B, c, Hr, Wr = y.shape
    H, W = Hr // r, Wr // r
    return np.ascontiguousarray(
        y.reshape(B, c, H, r, W, r).transpose(0, 1, 3, 5, 2, 4).reshape(B, c * r * r, H, W))


# -- backward -----------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node._grad = g.copy() if node._grad is None else node._grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- finite-difference checking ----------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    backward(f(x))
    analytic = x.grad
    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            fp = f(Tensor(base.copy())).item()
            flat[i] = old - step
            fm = f(Tensor(base.copy())).item()
            flat[i] = old
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check_many(loss_fn: Callable[[dict], Tensor], tensors: dict, step: float = 1e-6,
                    coords: int | None = None, seed: int = 0) -> dict:
    """Finite-difference check of ``loss_fn`` against every tensor in a name map.

    ``coords`` limits the number of probed coordinates per tensor (sampled
    with ``seed``); None probes all of them. Returns name -> max relative error.
    """
    leaves = {k: Tensor(np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64), requires_grad=True)
              for k, v in tensors.items()}
    backward(loss_fn(leaves))
    rng = np.random.default_rng(seed)
    errors = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad.reshape(-1)
        n = leaf.data.size
        idx = np.arange(n) if coords is None or coords >= n else rng.choice(n, coords, replace=False)
        worst = 0.0
        for i in idx:
            flat = leaf.data.reshape(-1)
            old = flat[i]
            vals = []
            for delta in (step, -step):
                flat[i] = old + delta
                with no_grad():
                    vals.append(loss_fn({k: Tensor(v.data) for k, v in leaves.items()}).item())
            flat[i] = old
            num = (vals[0] - vals[1]) / (2 * step)
            worst = max(worst, abs(analytic[i] - num) / max(1.0, abs(analytic[i])))
        errors[name] = worst
    return errors


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
