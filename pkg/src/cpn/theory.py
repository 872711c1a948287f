"""Brute-force check of the complementary-pair information inequality.

An abstract image is ``n`` patches.  The seed set ``omega`` holds the patches
that can be detected as object evidence, each with probability ``p[x] > 0``
and ``sum(p[omega]) == 1``; the rest have probability zero.  Detections on the
original (``y``) and on the two halves of a pair (``h``, ``hbar``) are subsets
of ``omega``.  Because the halves hide complementary patches, ``h`` and
``hbar`` are disjoint, and every seed found on the original is found on one
half: ``y <= h | hbar``.  The new seeds are ``(h | hbar) - y``.

Then ``H(h) + H(hbar) - H(y) = -sum(log p[new])`` and the pair never carries
less self-information than the original.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

MAX_N = 12
TOL = 1e-12
# per-patch states inside omega: undetected, only h, only hbar, y and h, y and hbar
STATES = ((False, False, False), (False, True, False), (False, False, True),
          (True, True, False), (True, False, True))


@dataclass(frozen=True)
class SeedModel:
    n: int
    omega: frozenset
    p: tuple  # length n, zero off omega
    y: frozenset
    h: frozenset
    hbar: frozenset

    def validate(self) -> None:
        if len(self.p) != self.n:
            raise ValueError(f"p has {len(self.p)} entries for {self.n} patches")
        if not self.omega or not self.omega <= set(range(self.n)):
            raise ValueError("omega must be a non-empty subset of the patches")
        if abs(sum(self.p[x] for x in self.omega) - 1) > 1e-9:
            raise ValueError("p must sum to 1 over omega")
        if any(self.p[x] != 0 for x in range(self.n) if x not in self.omega):
            raise ValueError("p must vanish off omega")
        if any(self.p[x] <= 0 for x in self.omega):
            raise ValueError("p must be positive on omega")
        for name in ("y", "h", "hbar"):
            if not getattr(self, name) <= self.omega:
                raise ValueError(f"{name} must be a subset of omega")
        if self.h & self.hbar:
            raise ValueError("h and hbar must be disjoint (complementary halves)")
        if not self.y <= self.h | self.hbar:
            raise ValueError("every seed of the original must appear on one half")

    @property
    def new_seeds(self) -> frozenset:
        return (self.h | self.hbar) - self.y


def self_information(detect, p) -> float:
    """-sum(log p[x]) over the detected patches, natural log."""
    total = 0.0
    for x in sorted(detect):
        if p[x] <= 0:
            raise ValueError(f"patch {x} has zero probability and cannot be detected")
        total -= math.log(p[x])
    return total


@dataclass
class InequalityResult:
    lhs: float
    rhs: float
    holds: bool
    slack: float


def verify_inequality(model: SeedModel) -> InequalityResult:
    model.validate()
    lhs = self_information(model.h, model.p) + self_information(model.hbar, model.p)
    rhs = self_information(model.y, model.p)
    return InequalityResult(lhs, rhs, lhs >= rhs - TOL, lhs - rhs)


def sample_distribution(n: int, p_mode: str, rng: np.random.Generator | None = None):
    """``(omega, p)``: all patches uniformly, or a random seed set with Dirichlet weights.

    Random seed sets have at least two patches when ``n >= 2``, so every
    new seed carries positive information.
    """
    _check_n(n)
    if p_mode == "uniform":
        return frozenset(range(n)), tuple([1.0 / n] * n)
    if p_mode != "random":
        raise ValueError(f"p_mode must be uniform or random, got {p_mode!r}")
    if rng is None:
        raise ValueError("random p_mode needs an rng")
    k = int(rng.integers(min(2, n), n + 1))
    omega = sorted(rng.choice(n, size=k, replace=False).tolist())
    w = rng.dirichlet(np.ones(k)) if k > 1 else np.ones(1)
    p = [0.0] * n
    for x, v in zip(omega, w):
        p[x] = float(v)
    return frozenset(omega), tuple(p)


def _check_n(n: int) -> None:
    if not 1 <= n <= MAX_N:
        raise ValueError(f"n must lie in [1, {MAX_N}] for exhaustive enumeration, got {n}")


def decomposition_count(omega_size: int) -> int:
    return len(STATES) ** omega_size


def enumerate_models(n: int, p_mode: str = "uniform", rng: np.random.Generator | None = None,
                     omega=None, p=None):
    """Every valid ``(y, h, hbar)`` for one sampled ``(omega, p)``, in a fixed order."""
    _check_n(n)
    if omega is None:
        omega, p = sample_distribution(n, p_mode, rng)
    members = sorted(omega)
    for combo in itertools.product(range(len(STATES)), repeat=len(members)):
        y, h, hb = set(), set(), set()
        for x, s in zip(members, combo):
            in_y, in_h, in_hb = STATES[s]
            if in_y:
                y.add(x)
            if in_h:
                h.add(x)
            if in_hb:
                hb.add(x)
        yield SeedModel(n, frozenset(omega), tuple(p), frozenset(y), frozenset(h), frozenset(hb))


@dataclass
class EnumStats:
    n: int
    p_mode: str
    omega_size: int
    models: int
    violations: int
    min_slack: float
    max_slack: float
    max_formula_err: float  # |slack + sum(log p[new])|
    equality_mismatches: int  # (slack == 0) disagreeing with "no informative new seed"
    equality_models: int


def _state_sums(q: np.ndarray):
    """Outer-sum tables over all state assignments of the patches with info ``q``."""
    tabs = {
        "h": np.array([0, 1, 0, 1, 0], dtype=np.float64),
        "hbar": np.array([0, 0, 1, 0, 1], dtype=np.float64),
        "y": np.array([0, 0, 0, 1, 1], dtype=np.float64),
        "new": np.array([0, 1, 1, 0, 0], dtype=np.float64),
    }
    out = {k: np.zeros(1) for k in tabs}
    informative = np.zeros(1, dtype=np.int64)
    for qi in q:
        for k, t in tabs.items():
            out[k] = (out[k][:, None] + qi * t[None, :]).ravel()
        step = (tabs["new"] * (qi > TOL)).astype(np.int64)
        informative = (informative[:, None] + step[None, :]).ravel()
    return out, informative


def bulk_check(n: int, omega, p, p_mode: str = "", chunk_digits: int = 9) -> EnumStats:
    """Vectorised exhaustive check over all 5^|omega| decompositions."""
    _check_n(n)
    members = sorted(omega)
    q = np.array([-math.log(p[x]) for x in members])
    head, tail = q[:max(0, len(q) - chunk_digits)], q[max(0, len(q) - chunk_digits):]
    tail_sums, tail_inf = _state_sums(tail)
    head_sums, head_inf = _state_sums(head)
    viol = mism = eq = 0
    lo, hi, err = math.inf, -math.inf, 0.0
    for i in range(head_inf.size):
        h = head_sums["h"][i] + tail_sums["h"]
        hb = head_sums["hbar"][i] + tail_sums["hbar"]
        y = head_sums["y"][i] + tail_sums["y"]
        new = head_sums["new"][i] + tail_sums["new"]
        slack = (h + hb) - y
        viol += int(np.count_nonzero(slack < -TOL))
        is_eq = np.abs(slack) <= TOL
        eq += int(np.count_nonzero(is_eq))
        mism += int(np.count_nonzero(is_eq != (head_inf[i] + tail_inf == 0)))
        lo, hi = min(lo, float(slack.min())), max(hi, float(slack.max()))
        err = max(err, float(np.max(np.abs(slack - new))))
    return EnumStats(n, p_mode, len(members), decomposition_count(len(members)), viol, lo, hi, err,
                     mism, eq)


def check_all(n_max: int = 10, draws: int = 20, seed: int = 0) -> list[EnumStats]:
    """Uniform p plus ``draws`` random (omega, p) per patch count 1..n_max."""
    _check_n(n_max)
    rng = np.random.default_rng(seed)
    out = []
    for n in range(1, n_max + 1):
        omega, p = sample_distribution(n, "uniform")
        out.append(bulk_check(n, omega, p, "uniform"))
        for _ in range(draws):
            omega, p = sample_distribution(n, "random", rng)
            out.append(bulk_check(n, omega, p, "random"))
    return out


def summarize(stats: list[EnumStats]) -> dict:
    return {
        "models": sum(s.models for s in stats),
        "violations": sum(s.violations for s in stats),
        "equality_mismatches": sum(s.equality_mismatches for s in stats),
        "min_slack": min(s.min_slack for s in stats),
        "max_slack": max(s.max_slack for s in stats),
        "max_formula_err": max(s.max_formula_err for s in stats),
    }
