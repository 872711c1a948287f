"""Central finite-difference gradient checking."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .losses import cpcr_loss, multilabel_soft_margin, tcp_loss
from .network import background_map, normalize_and_mask
from .refine import pcm_affinity, pcm_refine, prcm_refine
from .tensor import Tensor, no_grad, precision


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``.

    ``f`` must return a scalar tensor.  If ``f`` does not depend on ``x``
    through the graph (e.g. ``x`` is consumed through ``detach``), the
    analytic gradient is reported as zero and the check is skipped (0.0).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    leaf = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    out = f(leaf)
    if out.data.size != 1:
        raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
    out.backward()
    if leaf.grad is None:
        return 0.0
    analytic = leaf.grad.reshape(-1)
    base = x.data.copy()
    flat = base.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(base, dtype=x.dtype)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(base, dtype=x.dtype)).data)
        flat[i] = orig
        numeric[i] = (fp - fm) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


# --- the op and loss suite -------------------------------------------------

KINK_MARGIN = 1e-3
SUITE_TOL = 1e-4
# a relative metric cannot resolve tiny nonzero gradients against the ~1e-10
# roundoff floor of central differences; such points are resampled like kinks
MIN_GRAD = 1e-5


@dataclass
class SuiteResult:
    name: str
    errors: list

    @property
    def worst(self) -> float:
        return max(self.errors)

    @property
    def ok(self) -> bool:
        return self.worst < SUITE_TOL


def _away(rng, shape, margin=0.05, scale=1.0):
    """Uniform values whose magnitude stays above ``margin`` (clear of 0-kinks)."""
    mag = rng.uniform(margin, 1.0, size=shape) * scale
    return mag * rng.choice([-1.0, 1.0], size=shape)


def _proj(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum_(ops.mul(out, Tensor(r.reshape(out.shape))))


def _unary_cases(rng):
    """(name, function of one tensor, point sampler) for every op."""
    R = {}

    def rp(shape):
        key = tuple(shape)
        if key not in R:
            R[key] = rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)
        return R[key]

    def proj(out):
        return _proj(out, rp(out.shape))

    def distinct(shape, gap=0.05):
        # values on a shuffled lattice keep maxima and orderings separated
        n = int(np.prod(shape))
        return (rng.permutation(n) * gap + rng.uniform(-0.01, 0.01, size=n)).reshape(shape) - n * gap / 2

    conv_w = rng.normal(size=(3, 2, 3, 3))
    conv_b = rng.normal(size=3)
    mat_b = rng.normal(size=(4, 3))
    theta = rng.normal(size=(3, 6))
    other = rng.uniform(0.5, 2.0, size=(2, 3, 4))
    labels = np.array([[1, 0, 1], [1, 1, 0]])
    cases = [
        ("add", lambda x: proj(ops.add(x, Tensor(other))), lambda: rng.normal(size=(2, 3, 4))),
        ("sub", lambda x: proj(ops.sub(Tensor(other), x)), lambda: rng.normal(size=(2, 3, 4))),
        ("mul", lambda x: proj(ops.mul(x, x)), lambda: rng.normal(size=(2, 3, 4))),
        ("div", lambda x: proj(ops.div(Tensor(other), x)), lambda: rng.uniform(0.5, 2, size=(2, 3, 4))),
        ("scalar_mul", lambda x: proj(ops.scalar_mul(x, -1.7)), lambda: rng.normal(size=(5,))),
        ("relu", lambda x: proj(ops.relu(x)), lambda: _away(rng, (2, 3, 4))),
        ("sigmoid", lambda x: proj(ops.sigmoid(x)), lambda: rng.normal(size=(2, 5)) * 3),
        ("abs", lambda x: proj(ops.abs_(x)), lambda: _away(rng, (2, 3, 4))),
        ("exp", lambda x: proj(ops.exp(x)), lambda: rng.normal(size=(6,))),
        ("log", lambda x: proj(ops.log(x)), lambda: rng.uniform(0.2, 3, size=(6,))),
        ("pow", lambda x: proj(ops.pow_scalar(x, 1.7)), lambda: rng.uniform(0.2, 3, size=(6,))),
        ("sum_axis", lambda x: proj(ops.sum_(x, axis=1)), lambda: rng.normal(size=(2, 3, 4))),
        ("mean", lambda x: ops.mean(ops.mul(x, x)), lambda: rng.normal(size=(2, 3, 4))),
        ("max_reduce", lambda x: proj(ops.max_reduce(x, axis=2)), lambda: distinct((2, 3, 4))),
        ("global_avg_pool", lambda x: proj(ops.global_avg_pool(x)), lambda: rng.normal(size=(2, 3, 4, 5))),
        ("reshape", lambda x: proj(ops.reshape(ops.mul(x, x), (4, 6))), lambda: rng.normal(size=(2, 3, 4))),
        ("transpose", lambda x: proj(ops.transpose(ops.mul(x, x), (2, 0, 1))),
         lambda: rng.normal(size=(2, 3, 4))),
        ("broadcast_to", lambda x: proj(ops.broadcast_to(x, (2, 3, 4))), lambda: rng.normal(size=(2, 1, 4))),
        ("concat", lambda x: proj(ops.concat([x, ops.mul(x, x)], axis=1)), lambda: rng.normal(size=(2, 3))),
        ("take_flat", lambda x: proj(ops.take_flat(ops.mul(x, x), np.array([0, 5, 5, 7]))),
         lambda: rng.normal(size=(2, 4))),
        ("matmul", lambda x: proj(ops.matmul(x, Tensor(mat_b))), lambda: rng.normal(size=(5, 4))),
        ("matmul_batched", lambda x: proj(ops.matmul(Tensor(theta), ops.reshape(x, (2, 6, 4)))),
         lambda: rng.normal(size=(2, 6, 4))),
        ("conv2d_input", lambda x: proj(ops.conv2d(x, Tensor(conv_w), Tensor(conv_b), stride=2, pad=1)),
         lambda: rng.normal(size=(2, 2, 5, 5))),
        ("conv2d_weight", lambda w: proj(ops.conv2d(Tensor(other.reshape(1, 2, 3, 4)), w, pad=1)),
         lambda: rng.normal(size=(3, 2, 3, 3))),
        ("conv2d_relu", lambda x: _conv_relu(x, conv_w, conv_b, proj), lambda: _conv_relu_point(rng, conv_w, conv_b)),
        ("softmax", lambda x: proj(ops.softmax(x, axis=1)), lambda: rng.normal(size=(2, 4, 3)) * 2),
        ("bilinear_up", lambda x: proj(ops.bilinear_resize(x, 7, 9)), lambda: rng.normal(size=(1, 2, 3, 4))),
        ("bilinear_down", lambda x: proj(ops.bilinear_resize(x, 3, 2)), lambda: rng.normal(size=(1, 2, 8, 5))),
        ("normalize_and_mask", lambda x: proj(normalize_and_mask(x, labels)), lambda: _cam_point(rng)),
        ("background_map", lambda x: proj(background_map(normalize_and_mask(x, labels), 1.5)),
         lambda: _cam_point(rng)),
    ]
    return cases


def _conv_relu(x, w, b, proj):
    return proj(ops.relu(ops.conv2d(x, Tensor(w), Tensor(b), pad=1)))


def _conv_relu_point(rng, w, b):
    # resample until every pre-activation sits clear of the ReLU kink
    for _ in range(1000):
        x = rng.normal(size=(1, 2, 4, 4))
        with no_grad():
            pre = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
        if np.min(np.abs(pre)) > KINK_MARGIN * 10:
            return x
    raise RuntimeError("could not sample a kink-free point")


def _cam_point(rng):
    """Raw CAM [2, 3, 2, 3] with a unique, well-separated spatial max per class."""
    out = np.empty((2, 3, 6))
    for n in range(2):
        for c in range(3):
            v = rng.uniform(-1, 1, size=6)
            k = rng.integers(6)
            v[k] = np.abs(v).max() + rng.uniform(0.2, 1)
            v[np.abs(v) < 0.05] = 0.1
            out[n, c] = v
    return out.reshape(2, 3, 2, 3)


def _refine_cases(rng):
    c1 = 7
    params = {
        "g_pcm.w": Tensor(rng.normal(size=(5, c1))),
        "g_prcm.w": Tensor(rng.normal(size=(5, c1))),
        "phi.w": Tensor(rng.normal(size=(5, c1))),
    }
    X0 = rng.uniform(0.1, 1.0, size=(2, c1, 6))
    Y0 = rng.uniform(0, 1, size=(2, 3, 6))
    R = rng.normal(size=(2, 3, 6))

    def proj(out):
        return _proj(out, R)

    def pcm_through_x(X):
        return proj(pcm_refine(Tensor(Y0), pcm_affinity(params, X), "row"))

    def x_point():
        # keep every Gram entry clear of the affinity ReLU and positive embeddings clear of |.|
        for _ in range(1000):
            X = rng.uniform(0.1, 1.0, size=(2, c1, 6))
            e = np.einsum("ec,ncp->nep", params["g_pcm.w"].data, X)
            if np.min(np.abs(e)) < 0.05:
                continue
            en = e / np.abs(e).sum(axis=1, keepdims=True)
            gram = np.einsum("nep,neq->npq", en, en)
            if np.min(np.abs(gram)) > 0.01:
                return X
        raise RuntimeError("could not sample a kink-free point")

    def prcm_clear(Y, X):
        # both PRCM embeddings clear of the |.| kink in their L1 norms
        sm = np.exp(Y - Y.max(axis=2, keepdims=True))
        Z = np.einsum("ncp,nkp->nck", sm / sm.sum(axis=2, keepdims=True), X)
        phiZ = np.einsum("nck,ek->nce", Z, params["phi.w"].data)
        gX = np.einsum("ek,nkp->nep", params["g_prcm.w"].data, X)
        return min(np.min(np.abs(phiZ)), np.min(np.abs(gX))) > 0.05

    def resample(draw, ok):
        for _ in range(1000):
            v = draw()
            if ok(v):
                return v
        raise RuntimeError("could not sample a kink-free point")

    def x_prcm():
        return resample(lambda: rng.uniform(0.1, 1, size=(2, c1, 6)), lambda x: prcm_clear(Y0, x))

    Xp = x_prcm()

    def y_prcm():
        return resample(lambda: rng.uniform(0, 1, size=(2, 3, 6)), lambda y: prcm_clear(y, Xp))

    return [
        ("pcm_affinity", pcm_through_x, x_point),
        ("pcm_refine_Y", lambda y: proj(pcm_refine(y, Tensor(np.abs(_gram(X0, params))), "row")),
         lambda: rng.uniform(0, 1, size=(2, 3, 6))),
        ("pcm_refine_global", lambda y: proj(pcm_refine(y, Tensor(np.abs(_gram(X0, params))), "global")),
         lambda: rng.uniform(0, 1, size=(2, 3, 6))),
        ("prcm_Y", lambda y: proj(prcm_refine(params, y, Tensor(Xp))), y_prcm),
        ("prcm_X", lambda x: proj(prcm_refine(params, Tensor(Y0), x)), x_prcm),
        ("prcm_Y_raw", lambda y: proj(prcm_refine(params, y, Tensor(X0), "none")),
         lambda: rng.uniform(0, 1, size=(2, 3, 6))),
        ("prcm_X_raw", lambda x: proj(prcm_refine(params, Tensor(Y0), x, "none")),
         lambda: rng.uniform(0.1, 1, size=(2, c1, 6))),
    ]


def _gram(X, params):
    e = np.einsum("ec,ncp->nep", params["g_pcm.w"].data, X)
    return np.einsum("nep,neq->npq", e, e)


def _loss_cases(rng):
    shape = (2, 3, 4, 4)
    lam = np.array([0.3, 0.6])
    labels = np.array([[1, 0, 1], [0, 1, 1]])
    fixed = {k: rng.uniform(0, 1, size=shape) for k in ("h", "hb", "rh", "rhb", "ro")}

    def tcp_point():
        for _ in range(1000):
            y = rng.uniform(0, 1, size=shape)
            raw = lam[:, None, None, None] * fixed["h"] + (1 - lam[:, None, None, None]) * fixed["hb"] - y
            if np.min(np.abs(raw)) > KINK_MARGIN:
                return y
        raise RuntimeError("could not sample a kink-free point")

    def tcp(y):
        return tcp_loss(y, Tensor(fixed["h"]), Tensor(fixed["hb"]), Tensor(fixed["ro"]), Tensor(fixed["rh"]),
                        Tensor(fixed["rhb"]), lam)

    def cpcr_point():
        for _ in range(1000):
            r = rng.uniform(0, 1, size=shape)
            per = _cpcr_parts(fixed, r, lam)
            flat = np.sort(per[0].ravel())[::-1]
            k = math.ceil(0.2 * flat.size)
            # only the r_hbar term has a kink in the checked leaf
            if np.min(np.abs(per[1])) > KINK_MARGIN and flat[k - 1] - flat[k] > 1e-4:
                return r
        raise RuntimeError("could not sample a kink-free point")

    def cpcr(r):
        return cpcr_loss(Tensor(fixed["ro"]), Tensor(fixed["h"]), Tensor(fixed["hb"]), Tensor(fixed["rh"]), r,
                         lam, 0.2)[0]

    return [
        ("multilabel_soft_margin", lambda s: multilabel_soft_margin(s, labels), lambda: rng.normal(size=(2, 3)) * 3),
        ("tcp_loss", tcp, tcp_point),
        ("cpcr_loss", cpcr, cpcr_point),
    ]


def _cpcr_parts(fixed, r_hbar, lam):
    lm = lam[:, None, None, None]
    gap_h = fixed["ro"] - lm * fixed["h"]
    gap_hb = fixed["ro"] - (1 - lm) * fixed["hb"]
    a = gap_h - (1 - lm) * r_hbar
    b = gap_hb - lm * fixed["rh"]
    return np.abs(a) + np.abs(b), a, b


def _conditioned(f, sample, tries: int = 1000) -> np.ndarray:
    """A sample whose analytic gradient is exactly zero or at least MIN_GRAD per coordinate."""
    for _ in range(tries):
        x = sample()
        leaf = Tensor(x.copy(), requires_grad=True)
        f(leaf).backward()
        g = np.abs(leaf.grad) if leaf.grad is not None else np.zeros(1)
        if not np.any((g > 0) & (g < MIN_GRAD)):
            return x
    raise RuntimeError("could not sample a well-conditioned point")


def run_suite(points: int = 10, seed: int = 0, eps: float = 1e-6) -> list[SuiteResult]:
    """Finite-difference check of every op and loss in 64-bit mode."""
    rng = np.random.default_rng(seed)
    out = []
    with precision(np.float64):
        for name, f, sample in _unary_cases(rng) + _refine_cases(rng) + _loss_cases(rng):
            errs = [finite_diff_check(f, Tensor(_conditioned(f, sample)), eps) for _ in range(points)]
            out.append(SuiteResult(name, errs))
    return out
