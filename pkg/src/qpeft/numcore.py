"""Dense numeric kernel with a small tape-based reverse-mode autodiff.

Every value flowing through the model is a :class:`Tensor` wrapping a numpy
array.  Operations record a backward closure only when at least one input
requires a gradient, so scoring with a fully frozen model builds no graph.

Randomness goes through :func:`make_rng`, which uses numpy's PCG64 bit
generator seeded from ``SeedSequence([root_seed, crc32(label)])``.  PCG64 and
the ziggurat normal sampler are platform independent, so equal seeds give
bit-identical draws.
"""
from __future__ import annotations

import contextlib
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def make_rng(seed: int, label: str = "") -> np.random.Generator:
    """PCG64 generator for ``(seed, label)``; labels give independent streams."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(label.encode("utf-8"))])
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, label: str) -> int:
    return int(make_rng(seed, label).integers(0, 2**31 - 1))


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for p, pg in node._backward(g):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


class Param(Tensor):
    """Named leaf tensor; ``trainable=False`` marks frozen weights."""

    __slots__ = ()

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(np.array(value, copy=True), requires_grad=trainable, name=name)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @property
    def value(self) -> np.ndarray:
        return self.data

    def freeze(self) -> None:
        self.requires_grad = False
        self.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            (a, _unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, _unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        ),
        "mul",
    )


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: ((x, g * (1.0 - y * y)),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    u = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    y = 0.5 * x.data * (1.0 + t)

    def back(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x.data**2)
        return ((x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du)),)

    return _make(y, (x,), back, "gelu")


def relu(x) -> Tensor:
    # derivative taken as 0 at exactly 0
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: ((x, g * mask),), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: ((x, g * y),), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: ((x, g / x.data),), "log")


# ---------------------------------------------------------------------------
# shape and reductions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ((a, ga), (b, gb))

    return _make(a.data @ b.data, (a, b), back, "matmul")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: ((x, g.reshape(old)),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: ((x, np.transpose(g, inv)),), "transpose")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((x, np.broadcast_to(g, x.shape)),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis), 1.0 / n)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(zip(xs, np.split(g, splits, axis=axis)))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, back, "concat")


def pad_stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack ``(T_i, d)`` tensors into ``(B, max T_i, d)``, zero-padding at the end."""
    xs = [as_tensor(x) for x in xs]
    d = xs[0].shape[1]
    tmax = max(x.shape[0] for x in xs)
    out = np.zeros((len(xs), tmax, d), dtype=xs[0].data.dtype)
    for i, x in enumerate(xs):
        out[i, : x.shape[0]] = x.data

    def back(g):
        return tuple((x, g[i, : x.shape[0]]) for i, x in enumerate(xs))

    return _make(out, xs, back, "pad_stack")


def take_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]``; gradient scatter-adds into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range [0, {table.shape[0]})")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _make(table.data[ids], (table,), back, "take_rows")


def gather(x, index: tuple) -> Tensor:
    """Advanced-index gather ``x[index]`` with scatter-add gradient."""
    x = as_tensor(x)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return ((x, gx),)

    return _make(x.data[index], (x,), back, "gather")


def segment_sum(x, segments, n: int) -> Tensor:
    x = as_tensor(x)
    segments = np.asarray(segments, dtype=np.int64)
    out = np.zeros(n, dtype=x.data.dtype)
    np.add.at(out, segments, x.data)
    return _make(out, (x,), lambda g: ((x, g[segments]),), "segment_sum")


# ---------------------------------------------------------------------------
# normalisation


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-shifted softmax; ``mask`` (broadcastable bool) marks allowed entries."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def back(g):
        return ((x, y * (g - np.sum(g * y, axis=axis, keepdims=True))),)

    return _make(y, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def back(g):
        return ((x, g - p * np.sum(g, axis=axis, keepdims=True)),)

    return _make(y, (x,), back, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (
            (x, gx),
            (gain, _unbroadcast(g * xhat, gain.shape)),
            (bias, _unbroadcast(g, bias.shape)),
        )

    return _make(xhat * gain.data + bias.data, (x, gain, bias), back, "layer_norm")


def softmax_rows(x) -> np.ndarray:
    """Row softmax of a 2-D matrix as a plain array."""
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=DEFAULT_DTYPE)
    if arr.ndim != 2:
        raise DimensionError("softmax_rows expects a 2-D matrix")
    with no_grad():
        return softmax(arr, axis=-1).data


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0

    @classmethod
    def for_param(cls, p: Param, lr: float, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "AdamState":
        return cls(np.zeros_like(p.data), np.zeros_like(p.data), lr, beta1, beta2, epsilon)


def adam_step(p: Param, s: AdamState) -> None:
    """One bias-corrected Adam update in place; zeroes ``p.grad`` afterwards."""
    if not p.trainable:
        raise ContractError(f"adam_step on frozen tensor {p.name!r}")
    if s.m.shape != p.shape:
        raise DimensionError(f"Adam state shape {s.m.shape} != param shape {p.shape}")
    g = np.zeros_like(p.data) if p.grad is None else p.grad
    s.step += 1
    s.m = s.beta1 * s.m + (1 - s.beta1) * g
    s.v = s.beta2 * s.v + (1 - s.beta2) * g * g
    mhat = s.m / (1 - s.beta1**s.step)
    vhat = s.v / (1 - s.beta2**s.step)
    p.data -= s.lr * mhat / (np.sqrt(vhat) + s.epsilon)
    p.grad = None


class Adam:
    def __init__(self, params: Iterable[Param], lr: float, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.params = [p for p in params]
        self.states = [AdamState.for_param(p, lr, beta1, beta2, epsilon) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    entries: list[tuple[str, tuple[int, ...], float, float, float]] = field(default_factory=list)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Param],
    eps: float = 1e-3,
    sample: int = 100,
    seed: int = 0,
    prefer_nonzero: bool = True,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    Coordinates are sampled per trainable tensor in round-robin order.  With
    ``prefer_nonzero`` the sample draws from coordinates whose analytic
    gradient is nonzero when a tensor has any, so sparse embedding tables do
    not fill the sample with trivial zeros.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in gradient check")
    if loss.requires_grad:
        loss.backward()
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.grad = None

    rng = make_rng(seed, "gradcheck")
    pools = []
    for p in params:
        a = analytic[id(p)]
        nz = np.flatnonzero(a)
        pool = nz if (prefer_nonzero and nz.size) else np.arange(a.size)
        pools.append(list(rng.permutation(pool)))
    coords: list[tuple[Param, int]] = []
    while len(coords) < sample and any(pools):
        for p, pool in zip(params, pools):
            if pool and len(coords) < sample:
                coords.append((p, int(pool.pop())))

    report = GradCheckReport(0.0, 0)
    with no_grad():
        for p, flat in coords:
            idx = np.unravel_index(flat, p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + eps
            lp = loss_fn().item()
            p.data[idx] = orig - eps
            lm = loss_fn().item()
            p.data[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss in gradient check")
            num = (lp - lm) / (2 * eps)
            ana = float(analytic[id(p)][idx])
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-12)
            report.entries.append((p.name, tuple(int(i) for i in idx), ana, num, rel))
            report.checked += 1
            if report.worst is None or rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = (p.name, tuple(int(i) for i in idx))
    return report
