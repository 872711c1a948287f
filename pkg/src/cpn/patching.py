"""Patch partitions and complementary patch pairs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage
from skimage.color import rgb2lab

_FOUR = ndimage.generate_binary_structure(2, 1)


@dataclass
class PatchPartition:
    patch_id: np.ndarray  # [H, W] int
    num_patches: int
    strategy: str  # "grid" or "slic"
    param: int  # S for grid, S_N for slic


@dataclass
class CpPair:
    original: np.ndarray
    hidden_mask: np.ndarray  # [H, W] bool, True = hidden in image_h
    image_h: np.ndarray
    image_hbar: np.ndarray
    lam: float
    lam_bar: float
    n_hidden: int
    num_patches: int


def grid_partition(image: np.ndarray, K, rng: np.random.Generator) -> PatchPartition:
    """Tile from the top-left with S x S blocks, S drawn uniformly from ``K``."""
    K = sorted(set(int(k) for k in K))
    if not K:
        raise ValueError("patch size set K is empty")
    h, w = image.shape[-2:]
    if max(K) > min(h, w) or min(K) < 1:
        raise ValueError(f"patch sizes {K} must lie in [1, {min(h, w)}]")
    s = K[int(rng.integers(len(K)))]
    return grid_partition_fixed(h, w, s)


def grid_partition_fixed(h: int, w: int, s: int) -> PatchPartition:
    cols = -(-w // s)
    ids = (np.arange(h)[:, None] // s) * cols + (np.arange(w)[None, :] // s)
    return PatchPartition(ids.astype(np.int64), int(-(-h // s) * cols), "grid", s)


# --- SLIC -----------------------------------------------------------------

def slic_partition(image: np.ndarray, n_segments: int, compactness: float = 10.0,
                   iters: int = 10) -> PatchPartition:
    """SLIC superpixels with connectivity enforcement.

    k-means in (L, a, b, y, x) started from a regular grid of roughly
    ``n_segments`` centres; afterwards every 4-connected fragment smaller
    than a quarter of the nominal superpixel area is merged into the
    neighbour it shares the longest border with.
    """
    h, w = image.shape[-2:]
    if not 2 <= n_segments <= h * w // 4:
        raise ValueError(f"S_N={n_segments} outside [2, {h * w // 4}]")
    lab = rgb2lab(np.clip(image, 0, 1).transpose(1, 2, 0)).transpose(2, 0, 1)
    step = np.sqrt(h * w / n_segments)
    ny = max(1, int(round(np.sqrt(n_segments * h / w))))
    nx = max(1, int(round(n_segments / ny)))
    # pixel centres sit on integer coordinates
    cy, cx = np.meshgrid((np.arange(ny) + 0.5) * h / ny - 0.5, (np.arange(nx) + 0.5) * w / nx - 0.5, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()
    iy, ix = np.clip(np.rint(cy).astype(int), 0, h - 1), np.clip(np.rint(cx).astype(int), 0, w - 1)
    centers = np.column_stack([lab[:, iy, ix].T, cy, cx])
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    spatial_w = (compactness / step) ** 2
    win = int(np.ceil(step))
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(max(1, iters)):
        dist = np.full((h, w), np.inf)
        for k, (l_, a_, b_, y_, x_) in enumerate(centers):
            y0, y1 = max(0, int(y_) - win), min(h, int(y_) + win + 1)
            x0, x1 = max(0, int(x_) - win), min(w, int(x_) + win + 1)
            patch = lab[:, y0:y1, x0:x1]
            dc = ((patch[0] - l_) ** 2 + (patch[1] - a_) ** 2 + (patch[2] - b_) ** 2)
            ds = (yy[y0:y1, x0:x1] - y_) ** 2 + (xx[y0:y1, x0:x1] - x_) ** 2
            d = dc + ds * spatial_w
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        if np.isinf(dist).any():
            miss = np.isinf(dist)
            d2 = (yy[miss][:, None] - centers[:, 3]) ** 2 + (xx[miss][:, None] - centers[:, 4]) ** 2
            labels[miss] = np.argmin(d2, axis=1)
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=len(centers)).astype(np.float64)
        feats = np.vstack([lab.reshape(3, -1), yy.ravel(), xx.ravel()])
        sums = np.stack([np.bincount(flat, weights=f, minlength=len(centers)) for f in feats], axis=1)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
    ids = enforce_connectivity(labels, max(1, int((h * w / n_segments) / 4)))
    return PatchPartition(ids, int(ids.max()) + 1, "slic", n_segments)


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split labels into 4-connected components and absorb the small ones."""
    comp = np.zeros_like(labels)
    nxt = 0
    for lab_id in np.unique(labels):
        cc, n = ndimage.label(labels == lab_id, structure=_FOUR)
        sel = cc > 0
        comp[sel] = cc[sel] - 1 + nxt
        nxt += n
    comp = _relabel_raster(comp)
    while True:
        sizes = np.bincount(comp.ravel())
        small = np.nonzero((sizes > 0) & (sizes < min_size))[0]
        if len(small) == 0 or np.count_nonzero(sizes) == 1:
            break
        c = small[0]
        nb = _border_counts(comp, c, len(sizes))
        if nb.sum() == 0:
            break
        comp[comp == c] = int(np.argmax(nb))
    return _relabel_raster(comp)


def _border_counts(comp: np.ndarray, c: int, n: int) -> np.ndarray:
    m = comp == c
    found = []
    for a, b in ((m[:, :-1], comp[:, 1:]), (m[:, 1:], comp[:, :-1]),
                 (m[:-1, :], comp[1:, :]), (m[1:, :], comp[:-1, :])):
        vals = b[a]
        found.append(vals[vals != c])
    return np.bincount(np.concatenate(found), minlength=n)


def _relabel_raster(comp: np.ndarray) -> np.ndarray:
    _, first = np.unique(comp.ravel(), return_index=True)
    order = np.unique(comp.ravel())[np.argsort(first)]
    lut = np.zeros(comp.max() + 1, dtype=np.int64)
    lut[order] = np.arange(len(order))
    return lut[comp]


# --- CP pairs -------------------------------------------------------------

def make_cp_pair(image: np.ndarray, part: PatchPartition, p_h: float, fill,
                 rng: Optional[np.random.Generator] = None,
                 hidden: Optional[np.ndarray] = None) -> CpPair:
    """Hide each patch of ``image_h`` with probability ``p_h``; ``image_hbar`` hides the rest.

    ``hidden`` (bool per patch) bypasses the random draw.
    """
    if hidden is None:
        if not 0 < p_h < 1:
            raise ValueError("p_h must lie in (0, 1)")
        hidden = rng.random(part.num_patches) < p_h
    hidden = np.asarray(hidden, dtype=bool)
    if hidden.shape != (part.num_patches,):
        raise ValueError(f"hidden vector must have length {part.num_patches}")
    mask = hidden[part.patch_id]
    fill_img = np.broadcast_to(np.asarray(fill, dtype=image.dtype)[:, None, None], image.shape)
    image_h = np.where(mask[None], fill_img, image)
    image_hbar = np.where(mask[None], image, fill_img)
    n_h = int(hidden.sum())
    lam = 1.0 - n_h / part.num_patches
    return CpPair(image, mask, image_h, image_hbar, lam, 1.0 - lam, n_h, part.num_patches)
