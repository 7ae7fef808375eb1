"""A small reverse-mode autodiff core over numpy arrays.

Layouts are channel-last: images are ``(N, H, W, C)``, sequences ``(N, L, C)``,
conv2d weights ``(kh, kw, Cin, Cout)`` and conv1d weights ``(k, Cin, Cout)``.
Gradients follow the dtype of the data, so the same graph runs in float32
for training and float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Run forward passes without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _result(data, parents, backward) -> Tensor:
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes differ {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = _wrap(x)
    out = np.logaddexp(0, x.data)

    def backward(g):
        # sigmoid, written to stay finite for large |x|
        sig = np.exp(-np.logaddexp(0, -x.data))
        return (g * sig,)

    return _result(out, (x,), backward)


def sum_all(x) -> Tensor:
    x = _wrap(x)
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def row_norm(x) -> Tensor:
    """Euclidean norm of every row of a 2-d tensor; gradient 0 at the origin."""
    x = _wrap(x)
    if x.data.ndim != 2:
        raise DimensionError("row_norm expects a 2-d tensor")
    n = np.sqrt((x.data * x.data).sum(axis=1))

    def backward(g):
        safe = np.where(n > 0, n, 1)
        return ((g / safe)[:, None] * x.data * (n > 0)[:, None],)

    return _result(n, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def take(x, idx) -> Tensor:
    """Basic (slice) indexing."""
    x = _wrap(x)

    def backward(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)

    return _result(x.data[idx], (x,), backward)


# ---------------------------------------------------------------------------
# layers


def linear(x, weight, bias) -> Tensor:
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply {weight.shape} to {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return _result(out, (x, weight, bias), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over every axis between batch and channel: ``(N, ..., C) -> (N, C)``."""
    x = _wrap(x)
    if x.data.ndim < 3:
        raise DimensionError("global_avg_pool expects (N, ..., C)")
    axes = tuple(range(1, x.data.ndim - 1))
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes)

    def backward(g):
        shape = (x.shape[0],) + (1,) * len(axes) + (x.shape[-1],)
        return (np.broadcast_to(g.reshape(shape) / count, x.shape).astype(x.dtype),)

    return _result(out.astype(x.dtype), (x,), backward)


def _pad_pair(p):
    if isinstance(p, (tuple, list)):
        return int(p[0]), int(p[1])
    return int(p), int(p)


def _conv_nhwc(x, weight, bias, stride, pad_h, pad_w) -> Tensor:
    N, H, W, C = x.shape
    kh, kw, cin, cout = weight.shape
    if cin != C:
        raise DimensionError(f"conv: input has {C} channels, weight expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv: bias shape {bias.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    xd = x.data
    if any(pad_h) or any(pad_w):
        xd = np.pad(xd, ((0, 0), pad_h, pad_w, (0, 0)))
    Hp, Wp = xd.shape[1], xd.shape[2]
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv: kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xd[:, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride, :].reshape(-1, C))
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        # reshape can return a strided view here, which would miss the BLAS path
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C))
    w2 = weight.data.reshape(kh * kw * C, cout)
    out = (cols @ w2 + bias.data).reshape(N, Ho, Wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = np.zeros((N, Hp, Wp, C), dtype=g.dtype)
            # one small matmul per kernel offset keeps the working set in cache
            for i in range(kh):
                for j in range(kw):
                    dpart = (g2 @ weight.data[i, j].T).reshape(N, Ho, Wo, C)
                    dxp[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride, :] += dpart
            dx = dxp[:, pad_h[0] : Hp - pad_h[1], pad_w[0] : Wp - pad_w[1], :]
        return dx, dw, db

    return _result(out, (x, weight, bias), backward)


def conv2d(x, weight, bias, stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation over ``(N, H, W, Cin)`` with ``(kh, kw, Cin, Cout)`` weights.

    ``padding`` is a symmetric zero pad applied to both spatial axes (an int),
    or a ``(before, after)`` pair used for both axes.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {weight.shape}")
    p = _pad_pair(padding)
    return _conv_nhwc(x, weight, bias, stride, p, p)


def conv1d(x, weight, bias, stride: int = 1, padding=0) -> Tensor:
    """1-d cross-correlation over ``(N, L, Cin)`` with ``(k, Cin, Cout)`` weights.

    ``padding`` may be an int or a ``(left, right)`` pair, which is how even
    kernels keep the sequence length.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.data.ndim != 3 or weight.data.ndim != 3:
        raise DimensionError(f"conv1d expects 3-d input and weight, got {x.shape}, {weight.shape}")
    x4 = reshape(x, (x.shape[0], 1, x.shape[1], x.shape[2]))
    w4 = reshape(weight, (1,) + weight.shape)
    out = _conv_nhwc(x4, w4, bias, stride, (0, 0), _pad_pair(padding))
    return reshape(out, (out.shape[0], out.shape[2], out.shape[3]))


def template_abs_diff(series, templates) -> Tensor:
    """``(N, w)`` series against ``(K, h)`` templates -> ``(N, w, h, K)`` of ``|a_i - t_kj|``."""
    series, templates = _wrap(series), _wrap(templates)
    if series.data.ndim != 2 or templates.data.ndim != 2:
        raise DimensionError("template_abs_diff expects (N, w) series and (K, h) templates")
    diff = series.data[:, :, None, None] - templates.data.T[None, None, :, :]
    sign = np.sign(diff)

    def backward(g):
        gs = g * sign
        return (
            gs.sum(axis=(2, 3)) if series.requires_grad else None,
            -gs.sum(axis=(0, 1)).T if templates.requires_grad else None,
        )

    return _result(np.abs(diff), (series, templates), backward)


def pair_abs_diff(a, b) -> Tensor:
    """Row-paired ``(N, w)`` and ``(N, h)`` -> ``(N, w, h, 1)`` of ``|a_i - b_j|``."""
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"pair_abs_diff expects paired batches, got {a.shape}, {b.shape}")
    diff = a.data[:, :, None] - b.data[:, None, :]
    sign = np.sign(diff)[..., None]

    def backward(g):
        gs = g * sign
        return (
            gs.sum(axis=(2, 3)) if a.requires_grad else None,
            -gs.sum(axis=(1, 3)) if b.requires_grad else None,
        )

    return _result(np.abs(diff)[..., None], (a, b), backward)


# ---------------------------------------------------------------------------
# parameters and optimisation


class ParamStore:
    """Ordered named parameters together with their AdamW moments."""

    def __init__(self, entries=None):
        self.entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict = {}
        self.v: dict = {}
        self.step_count = 0
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value))
        t.requires_grad = True
        self.entries[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.entries[name]

    def __contains__(self, name) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def n_values(self) -> int:
        return sum(t.data.size for t in self.entries.values())

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self.entries.items())

    def astype(self, dtype) -> "ParamStore":
        """Copy of the parameters (without optimizer state) in another dtype."""
        return ParamStore(OrderedDict((k, t.data.astype(dtype)) for k, t in self.entries.items()))

    def copy(self) -> "ParamStore":
        out = ParamStore(OrderedDict((k, t.data.copy()) for k, t in self.entries.items()))
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step_count = self.step_count
        return out


def adamw_step(
    params: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 1e-2,
) -> None:
    """One AdamW update with decoupled weight decay, then clear the gradients."""
    missing = [k for k, t in params.items() if t.grad is None]
    if missing:
        raise StateError(f"no gradient for parameter(s): {', '.join(missing)}")
    t = params.step_count + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        dt = p.data.dtype.type
        g = p.grad
        m = params.m[name] = dt(beta1) * params.m[name] + dt(1 - beta1) * g
        v = params.v[name] = dt(beta2) * params.v[name] + dt(1 - beta2) * g * g
        m_hat = m / dt(bc1)
        v_hat = v / dt(bc2)
        p.data = p.data - dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(eps))) - dt(lr * weight_decay) * p.data
        p.grad = None
    params.step_count = t


# ---------------------------------------------------------------------------
# gradient verification


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-6,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    The error at each coordinate is ``|numeric - analytic| / max(1, |analytic|)``.
    With ``max_coords`` only a random subset of coordinates is probed.
    """
    was = x.requires_grad
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise DimensionError("finite_difference_check needs a scalar-valued function")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.sort(np.random.default_rng(seed).choice(flat.size, max_coords, replace=False))
    worst = 0.0
    with no_grad():
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            fp = float(f(x).data)
            flat[c] = orig - step
            fm = float(f(x).data)
            flat[c] = orig
            num = (fp - fm) / (2 * step)
            ana = float(analytic.reshape(-1)[c])
            worst = max(worst, abs(num - ana) / max(1.0, abs(ana)))
    x.requires_grad = was
    return worst
