"""Command-line entry point.

Exit codes: 0 ok, 1 a check failed, 2 bad usage or unreadable input.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import cptf, experiments, gradcheck, theory
from .evaluation import DEFAULT_BETAS, cam_to_mask, evaluate, format_report, multiscale_cam, upsample_stack, write_report
from .imaging import generate_shapes_dataset, load_image, read_dataset, save_image, save_mask, write_dataset
from .network import OUTPUT_STRIDE
from .patching import grid_partition_fixed, make_cp_pair, slic_partition
from .tensor import no_grad
from .training import TrainConfig, load_run, train

log = logging.getLogger("cpn")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

# viridis anchor colours at 0, 1/4, 1/2, 3/4, 1
_RAMP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=np.float64)


class UsageError(Exception):
    pass


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """[H, W] in [0, 1] -> [H, W, 3] uint8 on a viridis-like ramp."""
    v = np.clip(values, 0, 1)
    stops = np.linspace(0, 1, len(_RAMP))
    rgb = np.stack([np.interp(v, stops, _RAMP[:, k]) for k in range(3)], axis=-1)
    return np.floor(rgb + 0.5).astype(np.uint8)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _config(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg = TrainConfig.parse(path.read_text(), cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set wants key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg = cfg.with_value(k.strip(), v.strip())
    cfg.validate()
    return cfg


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args) -> int:
    samples, mean = generate_shapes_dataset(args.n, args.classes, args.size, args.seed)
    write_dataset(samples, mean, args.out, classes=args.classes, size=args.size, seed=args.seed)
    print(f"wrote {len(samples)} images to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if not (Path(args.data) / "manifest.txt").exists():
        raise UsageError(f"no dataset manifest in {args.data}")

    def progress(phase, epoch, mean_loss):
        log.info("%s epoch %d: mean l_total %.5f", phase, epoch + 1, mean_loss)

    train(cfg, args.data, args.out, progress)
    print(f"run saved to {args.out}")
    return EXIT_OK


def _predict_labels(model, image: np.ndarray) -> np.ndarray:
    with no_grad():
        out = model.branch(image[None], np.ones((1, model.num_fg)), refine=False)
    return (out.scores.data[0] > 0).astype(np.int64)


def infer_cam(model, image: np.ndarray, labels, scales=(1.0,), beta: float = 0.3):
    """Full-resolution CAM stack and mask; odd extents are reflect-padded and cropped back."""
    h, w = image.shape[-2:]
    ph, pw = -h % OUTPUT_STRIDE, -w % OUTPUT_STRIDE
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else image
    res = multiscale_cam(model, padded, labels, scales)
    stack = upsample_stack(res.stack, h + ph, w + pw)[:, :h, :w]
    return stack, cam_to_mask(stack, beta)


def cmd_infer_cam(args) -> int:
    model, _ = load_run(args.run)
    image = load_image(args.image)
    labels = np.array(_ints(args.labels)) if args.labels else _predict_labels(model, image)
    if labels.shape != (model.num_fg,):
        raise UsageError(f"--labels needs {model.num_fg} entries")
    stack, mask = infer_cam(model, image, labels, _floats(args.scales), args.beta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for c in range(stack.shape[0]):
        PILImage.fromarray(heatmap_rgb(stack[c])).save(out / f"heatmap_{c}.png")
    save_mask(mask, out / "mask.png")
    cptf.save(stack, out / "cam_stack.cptf")
    print(f"labels {' '.join(map(str, labels))}; stack {stack.shape} written to {out}")
    return EXIT_OK


def cmd_eval_miou(args) -> int:
    model, _ = load_run(args.run)
    samples, _, _ = read_dataset(args.data)
    betas = [args.beta] if args.beta is not None else _floats(args.betas)
    beta, rep, curve = evaluate(model, samples, _floats(args.scales), betas)
    print(format_report(rep))
    if args.out:
        write_report(rep, args.out)
    return EXIT_OK


def _sweep_data(args):
    tr, mean, man = read_dataset(args.train)
    va, _, man_v = read_dataset(args.val)
    if man["classes"] != man_v["classes"]:
        raise UsageError("train and val datasets have different class counts")
    return tr, va, mean, int(man["classes"])


def cmd_ablation(args) -> int:
    cfg = _config(args)
    tr, va, mean, num_fg = _sweep_data(args)
    grid = _floats(args.grid) if args.grid else None
    if grid and args.sweep == "patch_size":
        grid = [int(v) for v in grid]
    rep = experiments.run_sweep(args.sweep, cfg, tr, va, mean, num_fg, _ints(args.seeds), grid)
    text = rep.to_tsv()
    Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    tr, va, mean, num_fg = _sweep_data(args)
    seeds = _ints(args.seeds)
    cmp_ = experiments.compare_modes(cfg, tr, va, mean, num_fg, seeds)
    text = cmp_.to_tsv()
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    dropped = all(last < first for first, last in cmp_.cpn_loss_drop)
    return EXIT_OK if cmp_.wins >= math.ceil(2 * len(seeds) / 3) and dropped else EXIT_CHECK


def _partition_png(ids: np.ndarray, seed: int) -> np.ndarray:
    colours = np.random.default_rng(seed).integers(0, 256, size=(int(ids.max()) + 1, 3), dtype=np.uint8)
    return colours[ids]


def cmd_patch_demo(args) -> int:
    if args.image:
        image = load_image(args.image)
        fill = image.reshape(3, -1).mean(axis=1)
    elif args.data:
        samples, fill, _ = read_dataset(args.data)
        if not 0 <= args.index < len(samples):
            raise UsageError(f"--index out of range (dataset has {len(samples)} images)")
        image = samples[args.index].image
    else:
        raise UsageError("patch-demo needs --image or --data")
    h, w = image.shape[-2:]
    if args.strategy == "grid":
        s = args.param or 16
        if not 1 <= s <= min(h, w):
            raise UsageError(f"grid patch size must lie in [1, {min(h, w)}]")
        part = grid_partition_fixed(h, w, s)
    else:
        part = slic_partition(image, args.param or 50)
    pair = make_cp_pair(image, part, args.p_h, fill, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(_partition_png(part.patch_id, args.seed)).save(out / "partition.png")
    save_image(pair.image_h, out / "image_h.png")
    save_image(pair.image_hbar, out / "image_hbar.png")
    print(f"{part.num_patches} patches, {pair.n_hidden} hidden, lambda {pair.lam:.4f}")
    return EXIT_OK


def cmd_check_inequality(args) -> int:
    stats = theory.check_all(args.n, args.draws, args.seed)
    s = theory.summarize(stats)
    print(f"models {s['models']}")
    print(f"violations {s['violations']}")
    print(f"equality_mismatches {s['equality_mismatches']}")
    print(f"min_slack {s['min_slack']:.6g}")
    print(f"max_slack {s['max_slack']:.6g}")
    print(f"max_formula_err {s['max_formula_err']:.3g}")
    ok = s["violations"] == 0 and s["equality_mismatches"] == 0 and s["max_formula_err"] <= theory.TOL
    return EXIT_OK if ok else EXIT_CHECK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.points, args.seed)
    for r in results:
        print(f"{r.name:<24}{r.worst:>12.3e}  {'ok' if r.ok else 'FAIL'}")
    bad = [r.name for r in results if not r.ok]
    if bad:
        print(f"failed: {', '.join(bad)}")
    return EXIT_CHECK if bad else EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpn", description="Complementary patch CAM training and evaluation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--classes", type=int, default=3, help="foreground classes")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    def config_args(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")

    p = sub.add_parser("train", help="train a baseline or CPN model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer-cam", help="CAM heatmaps, mask and stack for one image")
    p.add_argument("--run", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scales", default="1.0")
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--labels", help="comma-separated 0/1 per foreground class (default: predicted)")
    p.set_defaults(func=cmd_infer_cam)

    p = sub.add_parser("eval-miou", help="pseudo-mask mIoU over a dataset")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scales", default="1.0")
    p.add_argument("--betas", default=",".join(map(str, DEFAULT_BETAS)))
    p.add_argument("--beta", type=float, help="fixed background score instead of a sweep")
    p.add_argument("--out", help="report TSV")
    p.set_defaults(func=cmd_eval_miou)

    p = sub.add_parser("ablation", help="patch size, p_h or module sweep")
    p.add_argument("--sweep", required=True, choices=experiments.SWEEPS)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--grid", help="comma-separated cell values")
    p.add_argument("--out", required=True)
    config_args(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("compare", help="baseline against CPN per seed")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--out")
    config_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("patch-demo", help="partition and complementary pair images")
    p.add_argument("--image")
    p.add_argument("--data")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--strategy", choices=("grid", "slic"), default="grid")
    p.add_argument("--param", type=int, help="patch size (grid) or superpixel count (slic)")
    p.add_argument("--p-h", dest="p_h", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patch_demo)

    p = sub.add_parser("check-inequality", help="exhaustive information-inequality check")
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_inequality)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and loss")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
