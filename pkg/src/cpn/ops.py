"""Differentiable kernels on :class:`cpn.tensor.Tensor`.

Binary operations accept equal shapes or a scalar on either side; anything
wider must go through :func:`broadcast_to` explicitly.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor, as_tensor


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.ndim <= 1 or t.ndim == 0


def _lift(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


# --- binary ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Tensor._make(
        a.data * b.data, (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
    )


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    out = a.data / b.data
    return Tensor._make(
        out, (a, b),
        lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)),
    )


def scalar_mul(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return Tensor._make(x.data * c, (x,), lambda g: (g * c,))


# --- unary ----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


def abs_(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    return Tensor._make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def pow_scalar(x: Tensor, p: float) -> Tensor:
    if p == 1:
        return Tensor._make(x.data, (x,), lambda g: (g,))
    out = np.power(x.data, p)
    return Tensor._make(out, (x,), lambda g: (g * p * np.power(x.data, p - 1),))


# --- reductions -----------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _check_axis(x, axis)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[_check_axis(x, axis)]
    return scalar_mul(sum_(x, axis, keepdims), 1.0 / n)


def max_reduce(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = _check_axis(x, axis)
    idx = np.argmax(x.data, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(x.data, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx_k, g, axis=axis)
        return (gx,)

    return Tensor._make(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    scale = x.dtype.type(1.0 / (h * w))
    return Tensor._make(
        out, (x,),
        lambda g: (np.broadcast_to((g * scale)[:, :, None, None], x.shape).copy(),),
    )


# --- shape ----------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit expansion; size-1 axes (or missing leading axes) are repeated."""
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    lead = len(shape) - x.ndim

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(x.shape) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return Tensor._make(out, (x,), back)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    axis = _check_axis(xs[0], axis)
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, xs[0].shape)) if i != axis
        ):
            raise ValueError(f"shape mismatch in concat: {xs[0].shape} vs {x.shape}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return Tensor._make(out, tuple(xs), back)


def take_flat(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather entries of the flattened tensor."""
    idx = np.asarray(idx, dtype=np.int64)
    flat = x.data.reshape(-1)

    def back(g):
        gx = np.zeros(flat.shape, dtype=x.dtype)
        np.add.at(gx, idx, g)
        return (gx.reshape(x.shape),)

    return Tensor._make(flat[idx], (x,), back)


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[M,K] @ [K,N]; a shared leading batch axis is also accepted."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if a.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if b.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return Tensor._make(out, (a, b), back)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [N,Cin,H,W] with [Cout,Cin,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {w.shape} larger than padded input {x.shape}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError(f"conv2d output extent not exact: input {x.shape}, kernel {w.shape}, stride {stride}, pad {pad}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gw = (gm.T @ cols).reshape(w.shape)
        gcols = (gm @ wmat).reshape(n, ho, wo, cin, kh, kw)
        gxp = np.zeros((n, cin, hp, wp), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._make(out, parents, back)


# --- normalisation and resampling -----------------------------------------

def softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return Tensor._make(
        out, (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def resize_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1 - frac
        m[i, i1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError("output extents must be >= 1")
    if x.ndim != 4:
        raise ValueError(f"bilinear_resize expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if (out_h, out_w) == (h, w):
        return Tensor._make(x.data.copy(), (x,), lambda g: (g,))
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", rh, x.data, rw, optimize=True)
    return Tensor._make(
        out, (x,),
        lambda g: (np.einsum("ih,ncij,jw->nchw", rh, g, rw, optimize=True),),
    )
