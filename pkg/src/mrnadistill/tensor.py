"""Dense tensors with reverse-mode differentiation over a fixed op set.

A `Tensor` wraps a float32/float64 numpy array.  While a `Tape` is
active, every op appends a record (inputs, output, vjp closure); the
tape replays those records in exact reverse execution order to
accumulate gradients.  The op set is deliberately closed: the student
network, the distillation losses, and nothing else.  There is no graph
compiler and no implicit broadcasting beyond what the listed ops define.

Hot kernels (layer norm, embedding scatter) dispatch through
`mrnadistill.backend`, which selects the compiled extension or the numpy
fallback at import time; transcendentals run on numpy's SIMD loops
directly.
"""

from __future__ import annotations

import os
from typing import Callable, Iterable

import numpy as np

from .backend import kernels
from .errors import ContractError, DomainError, NumericalError, ShapeError

_DEBUG = os.environ.get("MRNADISTILL_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Enable per-op finite-value checks (slow; for tests/diagnosis)."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


class Tensor:
    """Shape-carrying dense array participating in a computation tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # small amount of sugar; the named ops below are the real API
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


class _Node:
    __slots__ = ("name", "inputs", "output", "vjp")

    def __init__(self, name, inputs, output, vjp):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_TAPE_STACK: list["Tape"] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Topologically ordered record of executed ops.

    Records are appended in execution order; `backward` walks them in
    exact reverse order, accumulating each gradient additively.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
        """Populate `.grad` for every tensor reachable from `loss`.

        Tensors in `params` that the loss does not depend on receive an
        explicit zero gradient.
        """
        if loss.data.shape != ():
            raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        seed = np.ones((), dtype=loss.data.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        for node in reversed(self._nodes):
            gout = node.output.grad
            if gout is None:
                continue
            gins = node.vjp(gout)
            for inp, gin in zip(node.inputs, gins):
                if gin is None or not isinstance(inp, Tensor):
                    continue
                if inp.grad is None:
                    inp.grad = gin
                else:
                    inp.grad = inp.grad + gin
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def _record(name: str, inputs: tuple, out_data: np.ndarray, vjp: Callable) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(out_data)):
        raise NumericalError(f"op {name} produced non-finite values")
    requires = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape._nodes.append(_Node(name, inputs, out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# structural ops (the student network)
# ---------------------------------------------------------------------------

def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of `table` ([V, d]) at integer `ids` (any shape)."""
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    out = table.data[ids]

    def vjp(g):
        dtable = np.zeros_like(table.data)
        flat_ids = np.ascontiguousarray(ids.reshape(-1), dtype=np.int64)
        g2 = np.ascontiguousarray(g.reshape(-1, table.data.shape[1]), dtype=table.data.dtype)
        kernels.embedding_grad(flat_ids, g2, dtable)
        return (dtable,)

    return _record("embedding_lookup", (table,), out, vjp)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b over the last axis of x."""
    di, do = w.data.shape
    if x.data.shape[-1] != di:
        raise ShapeError(f"affine input {x.shape} incompatible with weight {w.shape}")
    if b.data.shape != (do,):
        raise ShapeError(f"affine bias {b.shape} incompatible with weight {w.shape}")
    x2 = x.data.reshape(-1, di)
    out = (x2 @ w.data + b.data).reshape(x.data.shape[:-1] + (do,))

    def vjp(g):
        g2 = g.reshape(-1, do)
        dx = (g2 @ w.data.T).reshape(x.data.shape) if x.requires_grad else None
        dw = x2.T @ g2 if w.requires_grad else None
        db = g2.sum(axis=0) if b.requires_grad else None
        return (dx, dw, db)

    return _record("affine", (x, w, b), out, vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; kind is 'tanh' or 'gelu' (tanh form)."""
    if kind == "tanh":
        y = np.tanh(x.data)

        def vjp(g, y=y):
            return (g * (1.0 - y * y),)

        return _record("activation[tanh]", (x,), y, vjp)
    if kind == "gelu":
        xd = x.data
        c = xd.dtype.type(_GELU_C)
        a = xd.dtype.type(_GELU_A)
        t = np.tanh(c * (xd + a * xd * xd * xd))
        y = 0.5 * xd * (1.0 + t)

        def vjp(g, t=t):
            # tanh saved at forward, so the backward is pure polynomial
            dinner = c * (1.0 + 3.0 * a * xd * xd)
            return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

        return _record("activation[gelu]", (x,), y.astype(xd.dtype, copy=False), vjp)
    raise ContractError(f"unknown activation kind {kind!r}")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, scale + shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm gain {gain.shape}/bias {bias.shape} incompatible with input {x.shape}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, mean, rstd = kernels.layer_norm_forward(x2, gain.data, bias.data, eps)

    def vjp(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d), dtype=x2.dtype)
        dx2, dgain, dbias = kernels.layer_norm_backward(g2, x2, gain.data, mean, rstd)
        return (dx2.reshape(x.data.shape) if x.requires_grad else None,
                dgain if gain.requires_grad else None,
                dbias if bias.requires_grad else None)

    return _record("layer_norm", (x, gain, bias), y2.reshape(x.data.shape), vjp)


def residual_add(x: Tensor, y: Tensor) -> Tensor:
    """Same-shape addition (the residual connection)."""
    return add(x, y)


def masked_mean_pool(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of x[b, l, :] over positions l where mask[b, l] is true."""
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim != 3 or mask.shape != x.data.shape[:2]:
        raise ShapeError(f"masked_mean_pool expects x [B,L,d] with mask [B,L]; got {x.shape} and {mask.shape}")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise DomainError("masked_mean_pool: a row has an all-false mask")
    m = mask.astype(x.data.dtype)
    inv = (1.0 / counts).astype(x.data.dtype)
    out = np.einsum("bld,bl->bd", x.data, m) * inv[:, None]

    def vjp(g):
        return (g[:, None, :] * m[:, :, None] * inv[:, None, None],)

    return _record("masked_mean_pool", (x,), out, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    """View x with a new shape (same element count)."""
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.data.shape),)

    return _record("reshape", (x,), out, vjp)


def concat(x: Tensor, y: Tensor, axis: int = -1) -> Tensor:
    """Concatenate two tensors along one axis."""
    sx, sy = list(x.data.shape), list(y.data.shape)
    ax = axis % len(sx) if sx else 0
    sx[ax] = sy[ax] = -1
    if len(x.data.shape) != len(y.data.shape) or sx != sy:
        raise ShapeError(f"concat shapes {x.shape} and {y.shape} differ off axis {axis}")
    out = np.concatenate([x.data, y.data], axis=axis)
    split = x.data.shape[ax]

    def vjp(g):
        gx, gy = np.split(g, [split], axis=ax)
        return (gx, gy)

    return _record("concat", (x, y), out, vjp)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide the last axis by max(its l2 norm, eps)."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = np.maximum(norms, np.asarray(eps, dtype=x.data.dtype))
    out = x.data / n

    def vjp(g):
        # past the eps clamp the norm is constant, so the map is linear
        proj = (g * out).sum(axis=-1, keepdims=True)
        dx = np.where(norms > eps, (g - out * proj) / n, g / n)
        return (dx.astype(x.data.dtype, copy=False),)

    return _record("l2_normalize", (x,), out, vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, vjp)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, vjp)


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout: keep with prob 1-p and scale kept values by 1/(1-p).

    Identity when not training or p == 0; `rng` draws are consumed only
    in the active case so eval passes leave streams untouched.
    """
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    keep = rng.keep_mask(x.data.shape, p)
    scale_ = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    m = keep.astype(x.data.dtype) * scale_
    out = x.data * m

    def vjp(g):
        return (g * m,)

    return _record("dropout", (x,), out, vjp)


# ---------------------------------------------------------------------------
# glue ops (loss assembly)
# ---------------------------------------------------------------------------

def add(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape:
        raise ShapeError(f"add shapes differ: {x.shape} vs {y.shape}")
    out = x.data + y.data

    def vjp(g):
        return (g, g)

    return _record("add", (x, y), out, vjp)


def sub(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape:
        raise ShapeError(f"sub shapes differ: {x.shape} vs {y.shape}")
    out = x.data - y.data

    def vjp(g):
        return (g, -g)

    return _record("sub", (x, y), out, vjp)


def mul(x: Tensor, y) -> Tensor:
    """Elementwise product; `y` may be a Tensor or a constant array."""
    ydata = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=x.data.dtype)
    out = x.data * ydata

    def vjp(g):
        dx = _unbroadcast(g * ydata, x.data.shape)
        dy = _unbroadcast(g * x.data, ydata.shape) if isinstance(y, Tensor) else None
        return (dx, dy)

    return _record("mul", (x, y), out, vjp)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)

    def vjp(g):
        return (g * x.data.dtype.type(c),)

    return _record("scale", (x,), out, vjp)


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = x.data + x.data.dtype.type(c)

    def vjp(g):
        return (g,)

    return _record("add_scalar", (x,), out, vjp)


def tsum(x: Tensor, axis=None) -> Tensor:
    out = x.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False),)

    return _record("sum", (x,), out, vjp)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        if axis is None:
            return ((np.broadcast_to(g, x.data.shape) / n).astype(x.data.dtype, copy=False),)
        g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, x.data.shape) / n).astype(x.data.dtype, copy=False),)

    return _record("mean", (x,), out, vjp)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run loss_fn under a fresh tape and return analytic gradients."""
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss, params.values())
    return {name: p.grad for name, p in params.items()}


def finite_diff_check(model, loss_fn: Callable[[], Tensor], step: float = 1e-5,
                      tolerance: float = 1e-4) -> dict[str, float]:
    """Compare analytic gradients against central finite differences.

    `model` is a mapping name -> Tensor or an object with .parameters().
    Returns max relative error per parameter group; requires float64
    parameters (float32 cannot resolve the difference quotient).
    """
    params = model if isinstance(model, dict) else model.parameters()
    if not params:
        return {}
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(f"finite_diff_check requires float64 parameters; {name} is {p.data.dtype}")
    analytic = gradients(loss_fn, params)
    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(numeric), 1e-8)
            worst = max(worst, rel)
        report[name] = worst
    return report
