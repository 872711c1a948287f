"""Training configuration and the SGD training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import cptf, losses
from .imaging import read_dataset
from .network import OUTPUT_STRIDE, CPNModel, triplet_forward
from .patching import grid_partition, make_cp_pair, slic_partition
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "cpn"  # baseline | cpn
    epochs: int = 8
    pretrain_epochs: int = 24  # classification-only warm start before the main phase
    batch: int = 4
    lr0: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    patch: str = "grid:8,16"  # grid:<S,...> | slic:<S_N>
    p_h: float = 0.5
    ohem_frac: float = 0.2
    alpha: float = 1.0
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    seed: int = 0
    crop: int = 64
    flip: bool = True
    use_tcp: bool = True
    use_cpcr: bool = True
    use_pcm: bool = True
    use_prcm: bool = True
    head_lr_mult: float = 10.0  # lr multiplier for the refinement head
    detach_pair: bool = True
    detach_gap: bool = True
    pcm_mode: str = "row"
    affinity_norm: str = "pixel"
    prcm_norm: str = "pixel"

    def validate(self) -> None:
        errs = []
        if self.mode not in ("baseline", "cpn"):
            errs.append(f"mode must be baseline or cpn, got {self.mode!r}")
        if self.epochs < 1 or self.batch < 1 or self.pretrain_epochs < 0:
            errs.append("epochs and batch must be >= 1 and pretrain_epochs >= 0")
        if self.lr0 <= 0 or self.poly_power < 0:
            errs.append("lr0 must be > 0 and poly_power >= 0")
        if not 0 <= self.momentum < 1 or self.weight_decay < 0:
            errs.append("momentum must lie in [0,1) and weight_decay >= 0")
        if not 0 < self.p_h < 1:
            errs.append("p_h must lie in (0, 1)")
        if not 0 < self.ohem_frac <= 1:
            errs.append("ohem_frac must lie in (0, 1]")
        if self.head_lr_mult <= 0:
            errs.append("head_lr_mult must be > 0")
        if self.alpha <= 0 or min(self.w1, self.w2, self.w3) < 0:
            errs.append("alpha must be > 0 and loss weights >= 0")
        if self.crop < 16 or self.crop % OUTPUT_STRIDE:
            errs.append(f"crop must be >= 16 and a multiple of {OUTPUT_STRIDE}")
        if self.pcm_mode not in ("row", "global") or self.affinity_norm not in ("pixel", "global"):
            errs.append("pcm_mode must be row|global and affinity_norm pixel|global")
        if self.prcm_norm not in ("pixel", "none"):
            errs.append("prcm_norm must be pixel|none")
        if self.mode == "cpn" and not (self.use_pcm or self.use_prcm):
            errs.append("cpn mode needs at least one of use_pcm / use_prcm")
        try:
            self.patch_spec()
        except ValueError as e:
            errs.append(str(e))
        if errs:
            raise ValueError("; ".join(errs))

    def patch_spec(self) -> tuple[str, list[int]]:
        kind, _, arg = self.patch.partition(":")
        try:
            vals = [int(v) for v in arg.split(",") if v.strip()]
        except ValueError:
            raise ValueError(f"bad patch spec {self.patch!r}") from None
        if kind not in ("grid", "slic") or not vals or (kind == "slic" and len(vals) != 1):
            raise ValueError(f"bad patch spec {self.patch!r} (want grid:S1,S2 or slic:N)")
        return kind, vals

    def serialize(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={repr(v) if isinstance(v, float) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def parse(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        cfg = dataclasses.replace(base) if base else cls()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line without '=': {line!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            cfg = cfg.with_value(k, v)
        return cfg

    def with_value(self, key: str, value) -> "TrainConfig":
        types = {f.name: f.type for f in fields(self)}
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        return dataclasses.replace(self, **{key: _coerce(types[key], value)})


def _coerce(typ, value):
    if not isinstance(value, str):
        return value
    if typ in ("bool", bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in ("int", int):
        return int(value)
    if typ in ("float", float):
        return float(value)
    return value


def poly_lr(lr0: float, it: int, max_iter: int, power: float = 0.9) -> float:
    return lr0 * (1 - it / max_iter) ** power


class SGD:
    """Momentum SGD with coupled L2 weight decay and optional per-parameter lr multipliers."""

    def __init__(self, params, momentum: float, weight_decay: float, lr_mult=None):
        self.params = list(params)
        self.momentum, self.weight_decay = momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.lr_mult = list(lr_mult) if lr_mult is not None else [1.0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        for p, v, m in zip(self.params, self.velocity, self.lr_mult):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= (lr * m * v).astype(p.dtype)


def build_model(cfg: TrainConfig, num_fg: int) -> CPNModel:
    return CPNModel(num_fg, cfg.seed, refine_on=cfg.mode == "cpn", use_pcm=cfg.use_pcm,
                    use_prcm=cfg.use_prcm, alpha=cfg.alpha, pcm_mode=cfg.pcm_mode,
                    affinity_norm=cfg.affinity_norm, prcm_norm=cfg.prcm_norm)


def _augment(img: np.ndarray, crop: int, flip: bool, rng: np.random.Generator):
    h, w = img.shape[-2:]
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    y0 = int(rng.integers(h - crop + 1)) if crop < h else 0
    x0 = int(rng.integers(w - crop + 1)) if crop < w else 0
    do_flip = bool(flip and rng.random() < 0.5)
    out = img[:, y0:y0 + crop, x0:x0 + crop]
    if do_flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out), (y0, x0, do_flip)


class _PartitionCache:
    """SLIC is deterministic in the image, so partitions are reused across epochs."""

    def __init__(self, kind: str, vals: list[int]):
        self.kind, self.vals = kind, vals
        self.cache: dict = {}

    def get(self, key, img: np.ndarray, rng: np.random.Generator):
        if self.kind == "grid":
            return grid_partition(img, self.vals, rng)
        if key not in self.cache:
            self.cache[key] = slic_partition(img, self.vals[0])
        return self.cache[key]


@dataclass
class TrainResult:
    model: CPNModel
    log_rows: list
    config: TrainConfig


# refinement-head layers; they start from scratch in the main phase
HEAD_PREFIXES = ("proj3", "proj4", "g_pcm", "g_prcm", "phi")
LOG_HEADER = ("step", "l_cls", "l_tcp", "l_cpcr", "l_total", "lr", "phase", "epoch")


def _batches(samples, cfg: TrainConfig, rng: np.random.Generator, epochs: int):
    n = len(samples)
    steps = math.ceil(n / cfg.batch)
    for epoch in range(epochs):
        perm = rng.permutation(n)
        for b in range(steps):
            idx = perm[b * cfg.batch:(b + 1) * cfg.batch]
            imgs, keys = [], []
            for i in idx:
                img, aug = _augment(samples[i].image, cfg.crop, cfg.flip, rng)
                imgs.append(img)
                keys.append((int(i),) + aug)
            yield epoch, imgs, keys, np.stack([samples[i].labels for i in idx])


def _run_phase(model, cfg, samples, mean, rng, epochs, cpn, phase, rows, progress) -> None:
    names = sorted(model.params)
    mult = [cfg.head_lr_mult if n.split(".")[0] in HEAD_PREFIXES else 1.0 for n in names]
    opt = SGD([model.params[n] for n in names], cfg.momentum, cfg.weight_decay, mult)
    max_iter = epochs * math.ceil(len(samples) / cfg.batch)
    kind, vals = cfg.patch_spec()
    parts = _PartitionCache(kind, vals)
    zero = Tensor(0.0)
    w = (cfg.w1, cfg.w2, cfg.w3)
    it, last_epoch = 0, 0
    for epoch, imgs, keys, labels in _batches(samples, cfg, rng, epochs):
        images = np.stack(imgs)
        lr = poly_lr(cfg.lr0, it, max_iter, cfg.poly_power)
        if not cpn:
            out = model.branch(images, labels, refine=False)
            bundle = losses.total_loss(losses.multilabel_soft_margin(out.scores, labels), zero, zero, w)
        else:
            pairs = [make_cp_pair(img, parts.get(k, img, rng), cfg.p_h, mean, rng)
                     for img, k in zip(imgs, keys)]
            lam = np.array([p.lam for p in pairs])
            o, h, hb = triplet_forward(model, images, np.stack([p.image_h for p in pairs]),
                                       np.stack([p.image_hbar for p in pairs]), labels)
            l_cls = losses.cls_loss(o.scores, h.scores, hb.scores, labels)
            l_tcp = losses.tcp_loss(o.cams, h.cams, hb.cams, o.refined, h.refined, hb.refined,
                                    lam, cfg.detach_pair) if cfg.use_tcp else zero
            per = None
            if cfg.use_cpcr:
                l_cpcr, per = losses.cpcr_loss(o.cams, h.cams, hb.cams, h.refined, hb.refined, lam,
                                               cfg.ohem_frac, cfg.detach_gap)
            else:
                l_cpcr = zero
            bundle = losses.total_loss(l_cls, l_tcp, l_cpcr, w, per)
        opt.zero_grad()
        bundle.l_total.backward()
        opt.step(lr)
        v = bundle.values()
        rows.append((len(rows), v["l_cls"], v["l_tcp"], v["l_cpcr"], v["l_total"], lr, phase, epoch))
        it += 1
        if progress and epoch != last_epoch:
            progress(phase, last_epoch, _mean_total(rows, phase, last_epoch))
        last_epoch = epoch
    if progress:
        progress(phase, last_epoch, _mean_total(rows, phase, last_epoch))


def _mean_total(rows, phase, epoch) -> float:
    return float(np.mean([r[4] for r in rows if r[6] == phase and r[7] == epoch]))


def pretrain_key(cfg: TrainConfig) -> tuple:
    """Fields the pretraining phase depends on; equal keys give equal warm starts."""
    return (cfg.seed, cfg.pretrain_epochs, cfg.batch, cfg.lr0, cfg.poly_power, cfg.momentum,
            cfg.weight_decay, cfg.crop, cfg.flip)


def pretrain(cfg: TrainConfig, samples, mean, num_fg: int, progress=None):
    """Classification-only warm start: ``(backbone_state, log_rows)``."""
    model = CPNModel(num_fg, cfg.seed, refine_on=False)
    rows: list = []
    if cfg.pretrain_epochs:
        rng = np.random.default_rng(cfg.seed + 2_000_003)
        _run_phase(model, cfg, samples, mean, rng, cfg.pretrain_epochs, False, "pre", rows, progress)
    return {k: v.copy() for k, v in model.state_dict().items()}, rows


def train_on_samples(cfg: TrainConfig, samples, mean, num_fg: int, progress=None,
                     warm_start=None) -> TrainResult:
    """Optional classification-only pretraining, then the main phase.

    The pretraining phase has its own random stream and touches only the
    backbone, so baseline and CPN runs sharing a seed enter the main phase
    from identical weights.  ``warm_start`` is a cached result of
    :func:`pretrain` for the same :func:`pretrain_key`.
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    model = build_model(cfg, num_fg)
    state, rows = warm_start if warm_start is not None else pretrain(cfg, samples, mean, num_fg, progress)
    for k, v in state.items():
        model.params[k].data = v.copy()
    rows = list(rows)
    rng = np.random.default_rng(cfg.seed + 1_000_003)
    _run_phase(model, cfg, samples, mean, rng, cfg.epochs, cfg.mode == "cpn", "main", rows, progress)
    return TrainResult(model, rows, cfg)


def format_log(rows) -> str:
    lines = ["\t".join(LOG_HEADER)]
    for r in rows:
        lines.append("\t".join([str(r[0])] + [f"{v:.9g}" for v in r[1:6]] + [r[6], str(r[7])]))
    return "\n".join(lines) + "\n"


def epoch_means(rows, phase: str = "main", column: str = "l_total") -> list[float]:
    """Per-epoch mean of one loss column within a phase."""
    col = LOG_HEADER.index(column)
    by: dict = {}
    for r in rows:
        if r[6] == phase:
            by.setdefault(r[7], []).append(r[col])
    return [float(np.mean(by[k])) for k in sorted(by)]


def save_run(result: TrainResult, out_dir, num_fg: int) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cptf.save_bundle(result.model.state_dict(), out / "weights")
    (out / "config.txt").write_text(result.config.serialize() + f"num_fg={num_fg}\n")
    (out / "train_log.tsv").write_text(format_log(result.log_rows))


def load_run(run_dir) -> tuple[CPNModel, TrainConfig]:
    run = Path(run_dir)
    text = (run / "config.txt").read_text()
    num_fg = None
    keep = []
    for line in text.splitlines():
        if line.startswith("num_fg="):
            num_fg = int(line.split("=", 1)[1])
        else:
            keep.append(line)
    if num_fg is None:
        raise ValueError(f"{run / 'config.txt'} lacks num_fg")
    cfg = TrainConfig.parse("\n".join(keep))
    model = build_model(cfg, num_fg)
    model.load_state_dict(cptf.load_bundle(run / "weights"))
    return model, cfg


def train(cfg: TrainConfig, dataset_dir, out_dir, progress=None) -> TrainResult:
    cfg.validate()
    samples, mean, man = read_dataset(dataset_dir)
    num_fg = int(man["classes"])
    result = train_on_samples(cfg, samples, mean, num_fg, progress)
    save_run(result, out_dir, num_fg)
    return result
