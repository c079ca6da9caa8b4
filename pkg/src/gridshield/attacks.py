"""Scenario generation (noise + attacks) and scoring metrics.

Noise and gross errors are drawn in physical per-unit terms and then scaled
by the same per-row factors as the sensing matrix, so the corrupted model
y = A x + w + b holds in the normalized domain the estimators see.

Randomness comes from a counter-based generator (Philox) keyed by the seed,
so scenario batches are bitwise reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .sensing import Measurement, evaluate, lift_state

__all__ = ["NoiseModel", "AttackSpec", "ScenarioBatch", "generate",
           "attacked_region_rows", "rmse", "f1"]


@dataclass
class NoiseModel:
    sigma_vmag: float = 1e-5    # std-dev of squared-magnitude sensors, p.u.
    sigma_other: float = 0.005  # std-dev of power sensors, p.u.
    seed: int = 0

    def __post_init__(self):
        if self.sigma_vmag < 0 or self.sigma_other < 0:
            raise ValueError("noise standard deviations must be nonnegative")


@dataclass
class AttackSpec:
    """scattered(n_lines): all branch-flow rows of randomly chosen lines are
    corrupted.  zonal(zone): rows attached to the zone's interior (minus the
    secure rows) are corrupted; strict mode also corrupts the inner-boundary
    rows, for baseline comparisons."""
    kind: str = "scattered"              # "scattered" | "zonal" | "none"
    n_lines: int = 0
    zone: frozenset = frozenset()
    secure_rows: frozenset = frozenset()
    strict: bool = False
    magnitude_range: tuple = (3.75, 4.25)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("scattered", "zonal", "none"):
            raise ValueError(f"unknown attack kind {self.kind!r}")


@dataclass
class ScenarioBatch:
    y: np.ndarray
    w_true: np.ndarray
    b_true: np.ndarray
    j_true: set
    model: object = None
    meta: dict = field(default_factory=dict)

    def save(self, stem):
        """Binary + JSON pair for replay."""
        np.savez(str(stem) + ".npz", y=self.y, w=self.w_true, b=self.b_true)
        with open(str(stem) + ".json", "w") as fh:
            json.dump({"j_true": sorted(self.j_true), "meta": self.meta}, fh,
                      indent=1, sort_keys=True)

    @classmethod
    def load(cls, stem, model=None):
        dat = np.load(str(stem) + ".npz")
        with open(str(stem) + ".json") as fh:
            doc = json.load(fh)
        return cls(y=dat["y"], w_true=dat["w"], b_true=dat["b"],
                   j_true=set(doc["j_true"]), model=model, meta=doc["meta"])


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


def attacked_region_rows(model, zone):
    """(attacked_rows, inner_boundary_rows) of a zonal attack.

    Attacked rows sit on zone-internal buses and zone-internal lines; inner
    boundary rows are injections at buses adjacent to the zone and flows on
    zone-crossing lines.
    """
    grid = model.grid
    zone = set(zone)
    inner = {v for k in zone for v in grid.neighbors(k)} - zone
    attacked, boundary = set(), set()
    for i, m in enumerate(model.rows):
        if m.kind in ("vmag2", "pinj", "qinj"):
            if m.obj in zone:
                attacked.add(i)
            elif m.kind != "vmag2" and m.obj in inner:
                boundary.add(i)
        else:
            br = grid.branches[m.obj]
            ends = {br.from_bus, br.to_bus}
            if ends <= zone:
                attacked.add(i)
            elif ends & zone:
                boundary.add(i)
    return attacked, boundary


def default_secure_rows(model, zone):
    """One squared-voltage row per zone-internal bus: the minimal symmetry
    breaker for stealthy zonal attacks."""
    secure = set()
    for k in zone:
        m = Measurement("vmag2", k)
        try:
            secure.add(model.row_index(m))
        except KeyError:
            pass
    return secure


def generate(model, state, noise, attack):
    """Build one scenario: y = scale(m_physical + w + b)."""
    grid = model.grid
    x_true = lift_state(model, state)
    clean = model.A @ x_true  # already normalized

    rng_w = _rng(noise.seed)
    sig = np.array([noise.sigma_vmag if m.kind == "vmag2" else noise.sigma_other
                    for m in model.rows])
    w_phys = rng_w.normal(0.0, 1.0, model.n_m) * sig

    b_phys = np.zeros(model.n_m)
    j_true = set()
    rng_b = _rng(attack.seed)
    if attack.kind == "scattered":
        if attack.n_lines > grid.n_branches:
            raise ValueError("scattered attack requests more lines than exist")
        lines = rng_b.choice(grid.n_branches, size=attack.n_lines,
                             replace=False)
        chosen = set(int(l) for l in lines)
        j_true = {i for i, m in enumerate(model.rows)
                  if m.kind in ("pflow", "qflow") and m.obj in chosen}
    elif attack.kind == "zonal":
        attacked, boundary = attacked_region_rows(model, attack.zone)
        secure = set(attack.secure_rows)
        if not secure and not attack.strict:
            secure = default_secure_rows(model, attack.zone)
        if attack.strict:
            j_true = (attacked | boundary)
        else:
            j_true = attacked - secure
    if j_true:
        idx = np.array(sorted(j_true))
        lo, hi = attack.magnitude_range
        mag = rng_b.uniform(lo, hi, idx.size)
        sign = rng_b.choice([-1.0, 1.0], idx.size)
        b_phys[idx] = mag * sign

    w = w_phys * model.row_scale
    b = b_phys * model.row_scale
    y = clean + w + b
    return ScenarioBatch(y=y, w_true=w, b_true=b, j_true=j_true, model=model,
                         meta={"noise_seed": noise.seed,
                               "attack_seed": attack.seed,
                               "kind": attack.kind})


def rmse(v_true, v_hat):
    """Root-mean-square complex voltage error; both inputs gauge-fixed to the
    same reference beforehand."""
    v_true = np.asarray(v_true)
    v_hat = np.asarray(v_hat)
    if v_true.shape != v_hat.shape:
        raise ValueError("length mismatch")
    return float(np.sqrt(np.mean(np.abs(v_true - v_hat) ** 2)))


def f1(j_true, j_hat):
    """(precision, recall, f1) of bad-data support recovery."""
    j_true, j_hat = set(j_true), set(j_hat)
    tp = len(j_true & j_hat)
    if j_hat:
        precision = tp / len(j_hat)
    else:
        precision = 1.0 if not j_true else 0.0
    recall = tp / len(j_true) if j_true else 1.0
    if precision + recall == 0.0:
        return precision, recall, 0.0
    return precision, recall, 2.0 * precision * recall / (precision + recall)
