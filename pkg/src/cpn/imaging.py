"""Image I/O and the synthetic multi-label shapes dataset.

Images are float arrays shaped [3, H, W] with values in [0, 1].  Masks are
integer arrays [H, W] holding class ids, 0 being background.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

SHAPE_KINDS = ("circle", "rect", "triangle")

# body hue per class (weakly discriminative) and marker colour (strongly so)
_BODY_COLORS = np.array([
    [0.70, 0.45, 0.40],
    [0.42, 0.62, 0.45],
    [0.45, 0.48, 0.70],
    [0.66, 0.62, 0.38],
    [0.60, 0.42, 0.64],
])
_MARKER_COLORS = np.array([
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
])


@dataclass
class LabeledSample:
    image: np.ndarray  # [3, H, W] float in [0, 1]
    labels: np.ndarray  # [classes] in {0, 1}
    mask: np.ndarray  # [H, W] int, 0 = background


def labels_from_mask(mask: np.ndarray, classes: int) -> np.ndarray:
    present = np.zeros(classes, dtype=np.int64)
    for c in np.unique(mask):
        if c > 0:
            present[c - 1] = 1
    return present


def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rect":
        return (np.abs(yy - cy) <= r * 0.85) & (np.abs(xx - cx) <= r * 0.85)
    # upward triangle inscribed in the radius-r box
    top, bottom = cy - r, cy + r
    t = np.clip((yy - top) / (bottom - top), 0, 1)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= t * r)


def _render(classes_in_image, rng: np.random.Generator, size: int):
    img = np.empty((3, size, size))
    base = rng.uniform(0.35, 0.6)
    ramp = np.linspace(-0.08, 0.08, size)
    tilt = rng.uniform(-1, 1, size=2)
    img[:] = base + tilt[0] * ramp[None, :, None] + tilt[1] * ramp[None, None, :]
    img += rng.normal(0, 0.04, size=img.shape)
    mask = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    r_lo, r_hi = size * 0.14, size * 0.22
    for cls in classes_in_image:
        kind = SHAPE_KINDS[cls % len(SHAPE_KINDS)]
        for _ in range(200):
            r = rng.uniform(r_lo, r_hi)
            cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
            m = _shape_mask(kind, cy, cx, r, size)
            # one-pixel gap keeps shapes from touching
            grown = m.copy()
            grown[1:] |= m[:-1]
            grown[:-1] |= m[1:]
            grown[:, 1:] |= m[:, :-1]
            grown[:, :-1] |= m[:, 1:]
            if not (grown & occupied).any():
                break
        else:
            raise RuntimeError("could not place shapes without overlap")
        occupied |= m
        mask[m] = cls + 1
        body = _BODY_COLORS[cls] + rng.uniform(-0.12, 0.12, size=3)
        tex = rng.normal(0, 0.05, size=(3, size, size))
        img[:, m] = (body[:, None] + tex[:, m])
        # marker: a small square at a random spot inside the shape, <= 10% of its area
        ys, xs = np.nonzero(m)
        side = max(2, int(np.floor(np.sqrt(0.08 * m.sum()))))
        for _ in range(50):
            k = rng.integers(len(ys))
            y0, x0 = ys[k] - side // 2, xs[k] - side // 2
            if y0 < 0 or x0 < 0 or y0 + side > size or x0 + side > size:
                continue
            if m[y0:y0 + side, x0:x0 + side].all():
                break
        else:
            y0, x0, side = ys[0], xs[0], 1
        img[:, y0:y0 + side, x0:x0 + side] = _MARKER_COLORS[cls][:, None, None]
    return np.clip(img, 0, 1), mask


def generate_shapes_dataset(n: int, classes: int, size: int, seed: int):
    """Deterministic synthetic multi-label images.

    ``classes`` counts foreground classes (the full class count including
    background is ``classes + 1``).  Returns ``(samples, mean)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 2 <= classes <= 5:
        raise ValueError("classes must be in [2, 5]")
    if size < 32:
        raise ValueError(f"size {size} too small to place shapes (need >= 32)")
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        k = int(rng.integers(1, min(3, classes) + 1))
        chosen = sorted(rng.choice(classes, size=k, replace=False).tolist())
        img, mask = _render(chosen, rng, size)
        img = quantize(img) / 255.0
        samples.append(LabeledSample(img, labels_from_mask(mask, classes), mask))
    return samples, compute_dataset_mean(samples)


def compute_dataset_mean(samples) -> np.ndarray:
    if not samples:
        raise ValueError("need at least one sample")
    total = np.zeros(3)
    count = 0
    for s in samples:
        img = s.image if isinstance(s, LabeledSample) else s
        total += img.reshape(3, -1).sum(axis=1)
        count += img.shape[1] * img.shape[2]
    return total / count


# --- disk I/O -------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    """Round half up to 8-bit levels."""
    return np.floor(np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    PILImage.fromarray(quantize(img).transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ValueError(f"cannot read image {path}: {e}") from e
    return arr.transpose(2, 0, 1).copy()


def save_mask(mask: np.ndarray, path) -> None:
    PILImage.fromarray(mask.astype(np.uint8), mode="L").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            return np.asarray(im, dtype=np.int64).copy()
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise ValueError(f"cannot read mask {path}: {e}") from e


def write_dataset(samples, mean, directory, *, classes: int, size: int, seed: int) -> None:
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        save_image(s.image, d / "images" / f"{i:04d}.png")
        save_mask(s.mask, d / "masks" / f"{i:04d}.png")
        rows.append(f"{i:04d}\t" + " ".join(str(int(v)) for v in s.labels))
    (d / "labels.tsv").write_text("\n".join(rows) + "\n")
    manifest = {
        "n": len(samples), "classes": classes, "size": size, "seed": seed,
        "mean_r": repr(float(mean[0])), "mean_g": repr(float(mean[1])), "mean_b": repr(float(mean[2])),
    }
    (d / "manifest.txt").write_text("".join(f"{k}={v}\n" for k, v in manifest.items()))


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest missing: {path}")
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def read_dataset(directory):
    """Load a dataset written by :func:`write_dataset` (images re-read from PNG)."""
    d = Path(directory)
    man = read_manifest(d)
    samples = []
    for line in (d / "labels.tsv").read_text().splitlines():
        if not line.strip():
            continue
        sid, labs = line.split("\t")
        samples.append(LabeledSample(
            load_image(d / "images" / f"{sid}.png"),
            np.array([int(v) for v in labs.split()], dtype=np.int64),
            load_mask(d / "masks" / f"{sid}.png"),
        ))
    mean = np.array([float(man["mean_r"]), float(man["mean_g"]), float(man["mean_b"])])
    return samples, mean, man
