"""Toy CAM backbone, CAM normalisation and the background map."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import refine as _refine
from .tensor import Tensor, parameter

STAGE_WIDTHS = (16, 32, 64, 64)
STAGE_STRIDES = (1, 2, 2, 1)
# 4x4/stride-2/pad-1 halves extents exactly; 3x3/pad-1 preserves them
STAGE_KERNELS = (3, 4, 4, 3)
OUTPUT_STRIDE = int(np.prod(STAGE_STRIDES))
NORM_EPS = 1e-8
# fixed input standardisation: images in [0, 1] -> roughly zero-mean, unit-scale
INPUT_CENTER, INPUT_SCALE = 0.5, 4.0


def _he(rng, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_backbone(num_fg: int, rng: np.random.Generator) -> dict[str, Tensor]:
    params = {}
    cin = 3
    for i, (cout, k) in enumerate(zip(STAGE_WIDTHS, STAGE_KERNELS), start=1):
        params[f"conv{i}.w"] = parameter(_he(rng, (cout, cin, k, k)), f"conv{i}.w")
        params[f"conv{i}.b"] = parameter(np.zeros(cout), f"conv{i}.b")
        cin = cout
    params["theta"] = parameter(rng.normal(0.0, 0.01, size=(num_fg, cin)), "theta")
    return params


def forward_features(params: dict[str, Tensor], images: Tensor) -> list[Tensor]:
    """Run the four conv stages; returns every stage output (last one is ``f``)."""
    h, w = images.shape[-2:]
    if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
        raise ValueError(f"image extents {(h, w)} not divisible by output stride {OUTPUT_STRIDE}")
    x = ops.scalar_mul(ops.sub(images, INPUT_CENTER), INPUT_SCALE)
    stages = []
    for i, s in enumerate(STAGE_STRIDES, start=1):
        x = ops.relu(ops.conv2d(x, params[f"conv{i}.w"], params[f"conv{i}.b"], stride=s, pad=1))
        stages.append(x)
    return stages


def cam_from_features(f: Tensor, theta: Tensor) -> Tensor:
    """Class maps as the theta-weighted channel sum of ``f`` ([N,Cf,h,w] -> [N,C-1,h,w])."""
    if f.ndim != 4 or theta.ndim != 2 or f.shape[1] != theta.shape[1]:
        raise ValueError(f"feature/classifier mismatch: {f.shape} vs {theta.shape}")
    n, cf, h, w = f.shape
    cam = ops.matmul(theta, ops.reshape(f, (n, cf, h * w)))
    return ops.reshape(cam, (n, theta.shape[0], h, w))


def normalize_and_mask(raw: Tensor, labels: np.ndarray) -> Tensor:
    """ReLU, divide each class map by its spatial max, zero classes absent from ``labels``."""
    n, c, h, w = raw.shape
    labels = np.asarray(labels).reshape(n, c)
    r = ops.reshape(ops.relu(raw), (n, c, h * w))
    m = ops.max_reduce(r, axis=2, keepdims=True)
    tiny = m.data < NORM_EPS
    m_safe = ops.add(m, Tensor(tiny.astype(raw.dtype)))
    keep = (~tiny[..., 0] & (labels > 0)).astype(raw.dtype)
    keep = np.broadcast_to(keep[:, :, None], (n, c, h * w))
    out = ops.mul(ops.div(r, ops.broadcast_to(m_safe, (n, c, h * w))), Tensor(keep))
    return ops.reshape(out, (n, c, h, w))


def background_map(fg: Tensor, alpha: float = 1.0) -> Tensor:
    """Prepend the background channel (1 - max_c fg)^alpha."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    peak = ops.max_reduce(fg, axis=1, keepdims=True)
    bg = ops.pow_scalar(ops.sub(1.0, peak), alpha)
    return ops.concat([bg, fg], axis=1)


@dataclass
class BranchOutput:
    raw: Tensor  # [N, C-1, h, w] pre-normalisation CAM
    scores: Tensor  # [N, C-1]
    cams: Tensor  # [N, C, h, w] normalised, background first
    refined: Tensor | None = None  # [N, C, h, w]
    stages: list = field(default_factory=list)


class CPNModel:
    """Shared-weight classifier with optional refinement head.

    ``refine_on=False`` gives the plain CAM baseline.
    """

    def __init__(self, num_fg: int, seed: int = 0, *, refine_on: bool = True, use_pcm: bool = True,
                 use_prcm: bool = True, alpha: float = 1.0, pcm_mode: str = "row",
                 affinity_norm: str = "pixel", prcm_norm: str = "pixel"):
        rng = np.random.default_rng(seed)
        self.num_fg = num_fg
        self.params = init_backbone(num_fg, rng)
        self.refine_on = refine_on
        if refine_on:
            self.params.update(_refine.init_refine(rng, STAGE_WIDTHS[2], STAGE_WIDTHS[3]))
        self.use_pcm, self.use_prcm = use_pcm, use_prcm
        self.alpha = alpha
        self.pcm_mode, self.affinity_norm, self.prcm_norm = pcm_mode, affinity_norm, prcm_norm

    @property
    def num_classes(self) -> int:
        return self.num_fg + 1

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise ValueError(f"missing weights: {sorted(missing)}")
        for k, v in state.items():
            if k not in self.params:
                raise ValueError(f"unexpected weight {k}")
            if v.shape != self.params[k].shape:
                raise ValueError(f"weight {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.asarray(v, dtype=self.params[k].dtype).copy()

    def cast(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)

    def branch(self, images: np.ndarray, labels: np.ndarray, refine: bool | None = None) -> BranchOutput:
        """One branch: raw CAM, GAP scores, normalised stack and (optionally) the refined stack."""
        dtype = self.params["theta"].dtype
        x = Tensor(np.asarray(images, dtype=dtype))
        stages = forward_features(self.params, x)
        raw = cam_from_features(stages[-1], self.params["theta"])
        scores = ops.global_avg_pool(raw)
        cams = background_map(normalize_and_mask(raw, labels), self.alpha)
        out = BranchOutput(raw, scores, cams, None, stages)
        do_refine = self.refine_on if refine is None else refine and self.refine_on
        if do_refine:
            X = _refine.build_aggregate(self.params, x.data, stages[2], stages[3])
            out.refined = _refine.refine(self.params, cams, X, use_pcm=self.use_pcm,
                                         use_prcm=self.use_prcm, pcm_mode=self.pcm_mode,
                                         affinity_norm=self.affinity_norm, prcm_norm=self.prcm_norm)
        return out


def triplet_forward(model: CPNModel, images: np.ndarray, images_h: np.ndarray,
                    images_hbar: np.ndarray, labels: np.ndarray):
    """Evaluate the shared-weight model on the original and both pair images."""
    return (model.branch(images, labels), model.branch(images_h, labels),
            model.branch(images_hbar, labels))
