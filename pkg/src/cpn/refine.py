"""Attention refinement of CAMs: pixel correlation (PCM) and pixel-region correlation (PRCM).

All functions work on flattened maps: CAM stacks are [N, C, hw] and the
aggregated feature X is [N, C1, hw].
"""
from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, parameter

PROJ3, PROJ4 = 64, 128
AGG_CHANNELS = 3 + PROJ3 + PROJ4
EMBED = 64


def init_refine(rng: np.random.Generator, stage3_ch: int = 64, stage4_ch: int = 64,
                embed: int = EMBED) -> dict[str, Tensor]:
    c1 = AGG_CHANNELS

    def w(shape):
        return rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape)

    return {
        "proj3.w": parameter(w((PROJ3, stage3_ch)), "proj3.w"),
        "proj3.b": parameter(np.zeros((PROJ3, 1)), "proj3.b"),
        "proj4.w": parameter(w((PROJ4, stage4_ch)), "proj4.w"),
        "proj4.b": parameter(np.zeros((PROJ4, 1)), "proj4.b"),
        "g_pcm.w": parameter(w((embed, c1)), "g_pcm.w"),
        "g_prcm.w": parameter(w((embed, c1)), "g_prcm.w"),
        "phi.w": parameter(w((embed, c1)), "phi.w"),
    }


def _pointwise(wt: Tensor, x: Tensor, b: Tensor | None = None) -> Tensor:
    """1x1 convolution on a flattened map: [Co,Ci] x [N,Ci,hw]."""
    out = ops.matmul(wt, x)
    if b is not None:
        out = ops.add(out, ops.broadcast_to(b, out.shape))
    return out


def build_aggregate(params: dict[str, Tensor], images: np.ndarray, stage3: Tensor,
                    stage4: Tensor) -> Tensor:
    """X = [resized image | relu(proj3(stage3)) | relu(proj4(stage4))], cut from the backbone."""
    n, _, h, w = stage4.shape
    img = ops.bilinear_resize(Tensor(images, dtype=stage4.dtype), h, w)
    s3 = stage3.detach()
    if s3.shape[2:] != (h, w):
        s3 = ops.bilinear_resize(s3, h, w)
    s3 = ops.reshape(s3, (n, s3.shape[1], h * w))
    s4 = ops.reshape(stage4.detach(), (n, stage4.shape[1], h * w))
    p3 = ops.relu(_pointwise(params["proj3.w"], s3, params["proj3.b"]))
    p4 = ops.relu(_pointwise(params["proj4.w"], s4, params["proj4.b"]))
    return ops.concat([ops.reshape(img, (n, 3, h * w)), p3, p4], axis=1)


def pcm_affinity(params: dict[str, Tensor], X: Tensor, norm: str = "pixel") -> Tensor:
    """J = ReLU(e^T e) with e = g_pcm(X), columns L1-normalised (``norm='pixel'``).

    ``norm='global'`` divides the Gram matrix by the squared L1 norm of the
    whole embedding instead.
    """
    e = _pointwise(params["g_pcm.w"], X)
    if norm == "pixel":
        e = _l1_normalize(e, axis=1)
        gram = ops.matmul(ops.transpose(e, (0, 2, 1)), e)
    elif norm == "global":
        gram = ops.matmul(ops.transpose(e, (0, 2, 1)), e)
        n = e.shape[0]
        tot = ops.reshape(ops.sum_(ops.reshape(ops.abs_(e), (n, -1)), axis=1), (n, 1, 1))
        gram = ops.div(gram, ops.broadcast_to(ops.mul(tot, tot), gram.shape))
    else:
        raise ValueError(f"unknown affinity normalisation {norm!r}")
    return ops.relu(gram)


def _l1_normalize(e: Tensor, axis: int) -> Tensor:
    """Divide by the L1 norm along ``axis``; all-zero slices stay zero."""
    l1 = ops.sum_(ops.abs_(e), axis=axis, keepdims=True)
    l1 = ops.add(l1, Tensor((l1.data == 0).astype(e.dtype)))
    return ops.div(e, ops.broadcast_to(l1, e.shape))


def pcm_refine(Y: Tensor, J: Tensor, mode: str = "row") -> Tensor:
    """Propagate CAM values along affinities; ``mode`` picks the normaliser."""
    if mode == "row":
        col = ops.sum_(J, axis=1, keepdims=True)
        empty = col.data == 0
        col = ops.add(col, Tensor(empty.astype(J.dtype)))
        jn = ops.div(J, ops.broadcast_to(col, J.shape))
        hw = J.shape[-1]
        uniform = np.broadcast_to(empty.astype(J.dtype) / hw, J.shape)
        jn = ops.add(jn, Tensor(uniform))
        return ops.matmul(Y, jn)
    if mode == "global":
        n = J.shape[0]
        tot = ops.reshape(ops.sum_(ops.reshape(J, (n, -1)), axis=1), (n, 1, 1))
        out = ops.matmul(Y, J)
        return ops.div(out, ops.broadcast_to(tot, out.shape))
    raise ValueError(f"unknown PCM mode {mode!r}")


def prcm_refine(params: dict[str, Tensor], Y: Tensor, X: Tensor, norm: str = "pixel") -> Tensor:
    """Gate Y by the class softmax of pixel-region relations.

    Z = softmax_hw(Y) X^T is a per-class region descriptor; P_R = phi(Z) g(X)
    relates every pixel to every region; Y_prcm = Y * softmax_C(P_R).
    With ``norm='pixel'`` both embeddings are L1-normalised over the embedding
    axis, as in the PCM affinity, which bounds |P_R| by 1; ``'none'`` uses the
    raw bilinear form.
    """
    if norm not in ("pixel", "none"):
        raise ValueError(f"unknown PRCM normalisation {norm!r}")
    Z = ops.matmul(ops.softmax(Y, axis=2), ops.transpose(X, (0, 2, 1)))  # [N, C, C1]
    phiZ = ops.matmul(Z, ops.transpose(params["phi.w"], (1, 0)))  # [N, C, C2]
    gX = _pointwise(params["g_prcm.w"], X)  # [N, C2, hw]
    if norm == "pixel":
        phiZ, gX = _l1_normalize(phiZ, axis=2), _l1_normalize(gX, axis=1)
    pr = ops.matmul(phiZ, gX)  # [N, C, hw]
    return ops.mul(Y, ops.softmax(pr, axis=1))


def combine(y_pcm: Tensor, y_prcm: Tensor) -> Tensor:
    if y_pcm.shape != y_prcm.shape:
        raise ValueError(f"shape mismatch: {y_pcm.shape} vs {y_prcm.shape}")
    return ops.add(y_pcm, y_prcm)


def refine(params: dict[str, Tensor], Y: Tensor, X: Tensor, *, use_pcm: bool = True,
           use_prcm: bool = True, pcm_mode: str = "row", affinity_norm: str = "pixel",
           prcm_norm: str = "pixel") -> Tensor:
    """Refined CAM from a (detached) [N,C,h,w] stack and flattened X."""
    n, c, h, w = Y.shape
    y = ops.reshape(Y.detach(), (n, c, h * w))
    parts = []
    if use_pcm:
        parts.append(pcm_refine(y, pcm_affinity(params, X, affinity_norm), pcm_mode))
    if use_prcm:
        parts.append(prcm_refine(params, y, X, prcm_norm))
    if not parts:
        raise ValueError("refine needs at least one of PCM / PRCM")
    out = parts[0] if len(parts) == 1 else combine(parts[0], parts[1])
    return ops.reshape(out, (n, c, h, w))
