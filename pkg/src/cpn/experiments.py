"""Sweeps over patch size, hiding probability and module toggles, plus the baseline comparison."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .evaluation import DEFAULT_BETAS, evaluate
from .training import TrainConfig, epoch_means, pretrain, pretrain_key, train_on_samples

log = logging.getLogger(__name__)

SWEEPS = ("patch_size", "p_h", "module_toggle")
P_H_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
# cumulative rows; "+cpcr" trains on every element, "+ohem" restores the top fraction
MODULE_ROWS = (
    ("baseline", {"mode": "baseline"}),
    ("+tcp+pcm", {"mode": "cpn", "use_tcp": True, "use_pcm": True, "use_prcm": False, "use_cpcr": False}),
    ("+cpcr", {"mode": "cpn", "use_tcp": True, "use_pcm": True, "use_prcm": False, "use_cpcr": True,
               "ohem_frac": 1.0}),
    ("+ohem", {"mode": "cpn", "use_tcp": True, "use_pcm": True, "use_prcm": False, "use_cpcr": True}),
    ("+prcm", {"mode": "cpn", "use_tcp": True, "use_pcm": True, "use_prcm": True, "use_cpcr": True}),
)


@dataclass
class Cell:
    name: str
    overrides: dict
    extreme: bool = False


@dataclass
class CellResult:
    cell: Cell
    seeds: list
    fg: list
    miou: list

    @property
    def fg_mean(self) -> float:
        return float(np.mean(self.fg))

    @property
    def fg_sd(self) -> float:
        return float(np.std(self.fg, ddof=1)) if len(self.fg) > 1 else 0.0

    @property
    def miou_mean(self) -> float:
        return float(np.mean(self.miou))

    @property
    def miou_sd(self) -> float:
        return float(np.std(self.miou, ddof=1)) if len(self.miou) > 1 else 0.0


@dataclass
class SweepReport:
    kind: str
    results: list
    notes: list = field(default_factory=list)

    @property
    def extreme_ok(self) -> bool | None:
        """Extreme cells do not beat the best interior cell; None without extremes."""
        ext = [r.fg_mean for r in self.results if r.cell.extreme]
        inner = [r.fg_mean for r in self.results if not r.cell.extreme]
        if not ext or not inner:
            return None
        return max(ext) <= max(inner)

    def to_tsv(self) -> str:
        n_seeds = max(len(r.seeds) for r in self.results)
        head = ["cell", "extreme", "fg_mean", "fg_sd", "miou_mean", "miou_sd"]
        head += [f"fg_seed{i}" for i in range(n_seeds)]
        lines = ["\t".join(head)]
        for r in self.results:
            row = [r.cell.name, str(int(r.cell.extreme)), f"{r.fg_mean:.6f}", f"{r.fg_sd:.6f}",
                   f"{r.miou_mean:.6f}", f"{r.miou_sd:.6f}"] + [f"{v:.6f}" for v in r.fg]
            lines.append("\t".join(row))
        ok = self.extreme_ok
        if ok is not None:
            lines.append(f"# extreme_check\t{'ok' if ok else 'flag_for_inspection'}")
        lines += [f"# {n}" for n in self.notes]
        return "\n".join(lines) + "\n"


def sweep_cells(kind: str, base: TrainConfig, grid=None) -> list[Cell]:
    if kind == "p_h":
        return [Cell(f"p_h={v}", {"p_h": float(v)}) for v in (grid or P_H_GRID)]
    if kind == "module_toggle":
        return [Cell(name, dict(ov)) for name, ov in MODULE_ROWS]
    if kind == "patch_size":
        strategy, _ = base.patch_spec()
        if strategy == "grid":
            sizes = sorted(set(grid or (1, 4, 8, 16, base.crop)))
            if sizes[-1] > base.crop:
                raise ValueError(f"patch size {sizes[-1]} exceeds crop {base.crop}")
            # one pixel and the whole crop are the two degenerate partitions
            return [Cell(f"grid:{s}", {"patch": f"grid:{s}"}, s in (1, base.crop)) for s in sizes]
        counts = sorted(set(grid or (2, 8, 16, 50, 200)))
        return [Cell(f"slic:{s}", {"patch": f"slic:{s}"}, i in (0, len(counts) - 1))
                for i, s in enumerate(counts)]
    raise ValueError(f"unknown sweep {kind!r}; expected one of {SWEEPS}")


class _WarmStarts:
    def __init__(self, samples, mean, num_fg):
        self.samples, self.mean, self.num_fg = samples, mean, num_fg
        self.cache: dict = {}

    def get(self, cfg: TrainConfig):
        key = pretrain_key(cfg)
        if key not in self.cache:
            self.cache[key] = pretrain(cfg, self.samples, self.mean, self.num_fg)
        return self.cache[key]


def run_cell(cfg: TrainConfig, train_samples, val_samples, mean, num_fg, scales=(1.0,),
             betas=DEFAULT_BETAS, warm=None):
    """Train one configuration and score its pseudo masks; returns ``(report, train_result)``."""
    start = warm.get(cfg) if warm is not None else None
    result = train_on_samples(cfg, train_samples, mean, num_fg, warm_start=start)
    _, rep, _ = evaluate(result.model, val_samples, scales, betas)
    return rep, result


def run_sweep(kind: str, base: TrainConfig, train_samples, val_samples, mean, num_fg: int,
              seeds=(0, 1, 2), grid=None, scales=(1.0,), betas=DEFAULT_BETAS) -> SweepReport:
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    cells = sweep_cells(kind, base, grid)
    cfgs = []
    for c in cells:
        cfg = base
        for k, v in c.overrides.items():
            cfg = cfg.with_value(k, v)
        cfg.validate()
        cfgs.append(cfg)
    warm = _WarmStarts(train_samples, mean, num_fg)
    results = []
    for c, cfg in zip(cells, cfgs):
        fg, mi = [], []
        for s in seeds:
            rep, _ = run_cell(cfg.with_value("seed", s), train_samples, val_samples, mean, num_fg,
                              scales, betas, warm)
            fg.append(rep.fg_miou)
            mi.append(rep.miou)
            log.info("%s seed %d: fg %.4f mIoU %.4f", c.name, s, rep.fg_miou, rep.miou)
        results.append(CellResult(c, list(seeds), fg, mi))
    return SweepReport(kind, results)


@dataclass
class Comparison:
    seeds: list
    baseline_fg: list
    cpn_fg: list
    cpn_loss_drop: list  # (first main-epoch mean, last main-epoch mean)

    @property
    def margins(self) -> list:
        return [c - b for b, c in zip(self.baseline_fg, self.cpn_fg)]

    @property
    def wins(self) -> int:
        return sum(m >= 0 for m in self.margins)

    def to_tsv(self) -> str:
        lines = ["seed\tbaseline_fg\tcpn_fg\tmargin\tcpn_l_total_epoch1\tcpn_l_total_final"]
        for s, b, c, m, (first, last) in zip(self.seeds, self.baseline_fg, self.cpn_fg, self.margins,
                                             self.cpn_loss_drop):
            lines.append(f"{s}\t{b:.6f}\t{c:.6f}\t{m:+.6f}\t{first:.6f}\t{last:.6f}")
        lines.append(f"# cpn >= baseline in {self.wins} of {len(self.seeds)} seeds; "
                     f"mean margin {np.mean(self.margins):+.6f}")
        return "\n".join(lines) + "\n"


def compare_modes(base: TrainConfig, train_samples, val_samples, mean, num_fg: int, seeds=(0, 1, 2),
                  scales=(1.0,), betas=DEFAULT_BETAS) -> Comparison:
    """Baseline against CPN from the same warm start, per seed."""
    warm = _WarmStarts(train_samples, mean, num_fg)
    out = Comparison([], [], [], [])
    for s in seeds:
        b_rep, _ = run_cell(base.with_value("mode", "baseline").with_value("seed", s), train_samples,
                            val_samples, mean, num_fg, scales, betas, warm)
        c_rep, c_res = run_cell(base.with_value("mode", "cpn").with_value("seed", s), train_samples,
                                val_samples, mean, num_fg, scales, betas, warm)
        em = epoch_means(c_res.log_rows)
        out.seeds.append(s)
        out.baseline_fg.append(b_rep.fg_miou)
        out.cpn_fg.append(c_rep.fg_miou)
        out.cpn_loss_drop.append((em[0], em[-1]))
    return out
