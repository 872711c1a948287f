"""Training losses: classification, triplet CP consistency, CP cross regularisation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass
class LossBundle:
    l_cls: Tensor
    l_tcp: Tensor
    l_cpcr: Tensor
    l_total: Tensor
    cpcr_pixel_losses: np.ndarray | None
    weights: tuple[float, float, float]

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("l_cls", "l_tcp", "l_cpcr", "l_total")}


def multilabel_soft_margin(scores: Tensor, labels) -> Tensor:
    """Mean over classes (and batch) of the logistic loss, in log-sum-exp form."""
    y = np.asarray(labels, dtype=scores.dtype).reshape(scores.shape)
    s = scores.data
    # -log sigma(s) = softplus(-s); -log sigma(-s) = softplus(s)
    sp_pos = np.maximum(s, 0) + np.log1p(np.exp(-np.abs(s)))
    sp_neg = sp_pos - s
    per = y * sp_neg + (1 - y) * sp_pos
    scale = 1.0 / per.size
    sig = ops._stable_sigmoid(s)
    out = np.asarray(per.sum() * scale, dtype=s.dtype)
    return Tensor._make(out, (scores,), lambda g: (g * (sig - y) * scale,))


def cls_loss(s_o: Tensor, s_h: Tensor, s_hbar: Tensor, labels) -> Tensor:
    total = ops.add(ops.add(multilabel_soft_margin(s_o, labels), multilabel_soft_margin(s_h, labels)),
                    multilabel_soft_margin(s_hbar, labels))
    return ops.scalar_mul(total, 1.0 / 3.0)


def _lam_map(lam, shape, dtype) -> Tensor:
    lam = np.asarray(lam, dtype=dtype).reshape(-1)
    if lam.size == 1:
        lam = np.repeat(lam, shape[0])
    return Tensor(np.broadcast_to(lam.reshape((-1,) + (1,) * (len(shape) - 1)), shape))


def _check_shapes(*ts: Tensor) -> None:
    for t in ts[1:]:
        if t.shape != ts[0].shape:
            raise ValueError(f"shape mismatch: {ts[0].shape} vs {t.shape}")


def tcp_loss(y_o: Tensor, y_h: Tensor, y_hbar: Tensor, r_o: Tensor, r_h: Tensor, r_hbar: Tensor,
             lam, detach_pair: bool = True) -> Tensor:
    """Mean-L1 gap between the lambda-mix of the pair and the original, raw and refined.

    ``lam`` is a scalar or one value per batch item.  Without a refinement
    head (``r_o is None``) only the raw term is returned.
    """
    refined = r_o is not None
    _check_shapes(y_o, y_h, y_hbar, *((r_o, r_h, r_hbar) if refined else ()))
    lm = _lam_map(lam, y_o.shape, y_o.dtype)
    lbar = Tensor(1 - lm.data)
    if detach_pair:
        y_h, y_hbar = y_h.detach(), y_hbar.detach()
        if refined:
            r_h, r_hbar = r_h.detach(), r_hbar.detach()
    raw = ops.mean(ops.abs_(_mix_gap(lm, lbar, y_h, y_hbar, y_o)))
    if not refined:
        return raw
    ref = ops.mean(ops.abs_(_mix_gap(lm, lbar, r_h, r_hbar, r_o)))
    return ops.add(raw, ref)


def _mix_gap(lm: Tensor, lbar: Tensor, a: Tensor, b: Tensor, o: Tensor) -> Tensor:
    # lam*a + lbar*b - o, grouped so that a == b == o cancels exactly
    return ops.add(ops.mul(lm, ops.sub(a, o)), ops.mul(lbar, ops.sub(b, o)))


def ohem_select(values: np.ndarray, frac: float) -> np.ndarray:
    """Flat indices of the ceil(frac * n) largest values; ties go to the lower index."""
    if not 0 < frac <= 1:
        raise ValueError("ohem fraction must lie in (0, 1]")
    flat = values.reshape(-1)
    k = max(1, math.ceil(frac * flat.size - 1e-9))
    return np.argsort(-flat, kind="stable")[:k]


def cpcr_loss(y_o: Tensor, y_h: Tensor, y_hbar: Tensor, r_h: Tensor, r_hbar: Tensor, lam,
              ohem_frac: float = 0.2, detach_gap: bool = True) -> tuple[Tensor, np.ndarray]:
    """Cross regularisation of refined pair CAMs by the raw gaps, with OHEM.

    Returns the scalar loss and the per-element losses before selection.
    """
    _check_shapes(y_o, y_h, y_hbar, r_h, r_hbar)
    lm = _lam_map(lam, y_o.shape, y_o.dtype)
    lbar = Tensor(1 - lm.data)
    # y_o - lam*y_h written as lam*(y_o - y_h) + lbar*y_o so equal inputs cancel exactly
    gap_h = ops.add(ops.mul(lm, ops.sub(y_o, y_h)), ops.mul(lbar, y_o))
    gap_hbar = ops.add(ops.mul(lbar, ops.sub(y_o, y_hbar)), ops.mul(lm, y_o))
    if detach_gap:
        gap_h, gap_hbar = gap_h.detach(), gap_hbar.detach()
    per = ops.add(ops.abs_(ops.sub(gap_h, ops.mul(lbar, r_hbar))),
                  ops.abs_(ops.sub(gap_hbar, ops.mul(lm, r_h))))
    idx = ohem_select(per.data, ohem_frac)
    return ops.mean(ops.take_flat(per, idx)), per.data.copy()


def total_loss(l_cls: Tensor, l_tcp: Tensor, l_cpcr: Tensor, w=(1.0, 1.0, 1.0),
               cpcr_pixel_losses: np.ndarray | None = None) -> LossBundle:
    if any(v < 0 for v in w):
        raise ValueError("loss weights must be non-negative")
    tot = ops.add(ops.add(ops.scalar_mul(l_cls, w[0]), ops.scalar_mul(l_tcp, w[1])),
                  ops.scalar_mul(l_cpcr, w[2]))
    return LossBundle(l_cls, l_tcp, l_cpcr, tot, cpcr_pixel_losses, tuple(w))
