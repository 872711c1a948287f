"""Pseudo masks from CAM stacks, multi-scale aggregation and mIoU."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import NORM_EPS, OUTPUT_STRIDE, CPNModel
from .ops import resize_matrix
from .tensor import no_grad

log = logging.getLogger(__name__)

DEFAULT_BETAS = tuple(round(0.05 * i, 2) for i in range(1, 20))
PAPER_SCALES = (0.5, 1.0, 1.5, 2.0)


def resize_np(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear (half-pixel) resize of [..., H, W] without building a graph."""
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x.copy()
    rh = resize_matrix(h, out_h, x.dtype)
    rw = resize_matrix(w, out_w, x.dtype)
    return np.einsum("ih,...hw,jw->...ij", rh, x, rw, optimize=True)


def renormalize(stack: np.ndarray, labels=None) -> np.ndarray:
    """ReLU and per-class max normalisation of the foreground channels (index >= 1)."""
    out = stack.copy()
    fg = np.maximum(out[1:], 0)
    peak = fg.reshape(fg.shape[0], -1).max(axis=1)
    ok = peak >= NORM_EPS
    if labels is not None:
        ok &= np.asarray(labels).reshape(-1) > 0
    fg = np.where(ok[:, None, None], fg / np.where(ok, peak, 1)[:, None, None], 0)
    out[1:] = fg
    return out


@dataclass
class CamResult:
    stack: np.ndarray  # [C, h, w]
    skipped: list = field(default_factory=list)


def single_scale_cam(model: CPNModel, image: np.ndarray, labels) -> np.ndarray:
    """Normalised [C,h,w] stack: refined when the model has a refinement head."""
    with no_grad():
        out = model.branch(image[None], np.asarray(labels)[None])
    stack = (out.refined if out.refined is not None else out.cams).data[0].astype(np.float64)
    return renormalize(stack, labels)


def multiscale_cam(model: CPNModel, image: np.ndarray, labels, scales=(1.0,)) -> CamResult:
    if not scales:
        raise ValueError("scales must be non-empty")
    h, w = image.shape[-2:]
    base = (h // OUTPUT_STRIDE, w // OUTPUT_STRIDE)
    acc, used, skipped = None, 0, []
    for s in scales:
        sh = int(round(h * s / OUTPUT_STRIDE)) * OUTPUT_STRIDE
        sw = int(round(w * s / OUTPUT_STRIDE)) * OUTPUT_STRIDE
        if sh < OUTPUT_STRIDE or sw < OUTPUT_STRIDE:
            log.warning("scale %s gives degenerate size %dx%d; skipped", s, sh, sw)
            skipped.append(s)
            continue
        stack = single_scale_cam(model, resize_np(image, sh, sw), labels)
        stack = resize_np(stack, *base)
        acc = stack if acc is None else acc + stack
        used += 1
    if acc is None:
        raise ValueError(f"every scale in {list(scales)} was degenerate")
    return CamResult(renormalize(acc / used, labels), skipped)


def cam_to_mask(stack: np.ndarray, beta: float) -> np.ndarray:
    """Background channel set to ``beta``, then argmax (ties -> lowest class id)."""
    s = stack.copy()
    s[0] = beta
    return np.argmax(s, axis=0)


def upsample_stack(stack: np.ndarray, h: int, w: int) -> np.ndarray:
    return resize_np(stack, h, w)


@dataclass
class IoUReport:
    per_class: np.ndarray  # NaN marks undefined classes
    miou: float
    fg_miou: float
    bg_iou: float
    beta: float | None = None

    def rows(self) -> list[tuple[str, float]]:
        rows = [(f"class_{c}", float(v)) for c, v in enumerate(self.per_class)]
        rows += [("bg", self.bg_iou), ("fg", self.fg_miou), ("mIoU", self.miou)]
        return rows


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in extent")
    idx = gt.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def report_from_confusion(conf: np.ndarray) -> IoUReport:
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    defined = ~np.isnan(iou)
    miou = float(iou[defined].mean()) if defined.any() else float("nan")
    fg = iou[1:][defined[1:]]
    return IoUReport(iou, miou, float(fg.mean()) if fg.size else float("nan"), float(iou[0]))


def miou(preds, gts, num_classes: int) -> IoUReport:
    """Dataset-level IoU: intersections and unions accumulated before dividing."""
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, g in zip(preds, gts, strict=True):
        conf += confusion(p, g, num_classes)
    return report_from_confusion(conf)


def best_beta_sweep(stacks, gts, betas=DEFAULT_BETAS):
    """Best background score by mIoU; ties go to the smaller beta.

    ``stacks`` must already be at ground-truth resolution.
    Returns ``(beta, report, curve)`` with ``curve`` the mIoU per beta.
    """
    betas = sorted(betas)
    if not betas:
        raise ValueError("betas must be non-empty")
    num_classes = stacks[0].shape[0]
    fg_arg = [np.argmax(s[1:], axis=0) + 1 for s in stacks]
    fg_max = [np.max(s[1:], axis=0) for s in stacks]
    best, best_rep, curve = None, None, []
    for b in betas:
        preds = [np.where(m > b, a, 0) for a, m in zip(fg_arg, fg_max)]
        rep = miou(preds, gts, num_classes)
        rep.beta = b
        curve.append(rep.miou)
        if best_rep is None or rep.miou > best_rep.miou:
            best, best_rep = b, rep
    return best, best_rep, curve


def is_unimodal_or_flat(values, tol: float = 1e-9) -> bool:
    v = np.asarray(values, dtype=np.float64)
    peak = int(np.argmax(v))
    return bool(np.all(np.diff(v[:peak + 1]) >= -tol) and np.all(np.diff(v[peak:]) <= tol))


def pseudo_label_stacks(model: CPNModel, samples, scales=(1.0,)) -> list[np.ndarray]:
    """Per-sample CAM stacks upsampled to the ground-truth resolution."""
    out = []
    for s in samples:
        stack = multiscale_cam(model, s.image, s.labels, scales).stack
        out.append(upsample_stack(stack, *s.mask.shape))
    return out


def evaluate(model: CPNModel, samples, scales=(1.0,), betas=DEFAULT_BETAS):
    stacks = pseudo_label_stacks(model, samples, scales)
    return best_beta_sweep(stacks, [s.mask for s in samples], betas)


def format_report(rep: IoUReport) -> str:
    lines = [f"{'class':<10}{'IoU':>8}"]
    for name, v in rep.rows():
        lines.append(f"{name:<10}{'n/a' if np.isnan(v) else f'{100 * v:.2f}':>8}")
    if rep.beta is not None:
        lines.append(f"{'beta':<10}{rep.beta:>8.2f}")
    return "\n".join(lines)


def write_report(rep: IoUReport, path) -> None:
    lines = ["name\tiou"] + [f"{n}\t{'nan' if np.isnan(v) else repr(float(v))}" for n, v in rep.rows()]
    if rep.beta is not None:
        lines.append(f"beta\t{rep.beta!r}")
    Path(path).write_text("\n".join(lines) + "\n")
