"""Synthetic cities: a regular street grid with rectangular buildings in the blocks.

These stand in for real footprint/terrain data in tests and demos. A cell's
base station sits on the street intersection at the origin.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geo import BaseStation, Building, Scene, StreetNetwork, TerrainGrid, write_scene


@dataclass(frozen=True)
class SyntheticCitySpec:
    street_pitch: float = 100.0
    street_width: float = 20.0
    lots_per_side: int = 2
    coverage: float = 0.3
    height_mode: str = "constant"  # or "lognormal"
    height_median: float = 15.0
    height_sigma: float = 0.0  # log-space sigma for lognormal heights
    missing_height_fraction: float = 0.0
    jitter: float = 0.0  # fraction of the lot slack used for random offsets
    slope: tuple = (0.0, 0.0)  # terrain gradient dz/dx, dz/dy
    extent: float = 1100.0  # half-width of the generated square
    bs_height_agl: float = 25.0
    bs_id: str = "bs0"

    def __post_init__(self):
        if not self.street_pitch > 0:
            raise ValueError("street_pitch must be > 0")
        if not 0 <= self.coverage < 1:
            raise ValueError("coverage must lie in [0, 1)")
        if not 0 <= self.street_width < self.street_pitch:
            raise ValueError("street_width must lie in [0, street_pitch)")
        if self.height_mode not in ("constant", "lognormal"):
            raise ValueError(f"unknown height_mode {self.height_mode!r}")
        if not (self.height_median > 0 and self.height_sigma >= 0):
            raise ValueError("height_median must be > 0 and height_sigma >= 0")
        if not 0 <= self.missing_height_fraction <= 1 or not 0 <= self.jitter <= 1:
            raise ValueError("missing_height_fraction and jitter must lie in [0, 1]")
        if self.lots_per_side < 1 or not self.extent > 0:
            raise ValueError("lots_per_side must be >= 1 and extent > 0")
        object.__setattr__(self, "slope", tuple(float(s) for s in self.slope))

    @property
    def building_side(self) -> float:
        return self.street_pitch * math.sqrt(self.coverage) / self.lots_per_side

    @property
    def lot_side(self) -> float:
        return (self.street_pitch - self.street_width) / self.lots_per_side


def _terrain(spec: SyntheticCitySpec) -> TerrainGrid:
    # a plane is reproduced exactly by bilinear interpolation on a 2x2 grid
    e = spec.extent + spec.street_pitch
    gx, gy = spec.slope
    z = np.array([[gx * x + gy * y for x in (-e, e)] for y in (-e, e)])
    return TerrainGrid((-e, -e), 2 * e, z)


def generate_city(spec: SyntheticCitySpec, seed: int = 0, out_dir=None) -> Scene:
    """Build the scene; also write it in the scene file formats when ``out_dir`` is given."""
    b = spec.building_side
    lot = spec.lot_side
    if b > lot:
        raise ValueError(f"coverage {spec.coverage} infeasible: building side {b:.2f} m "
                         f"exceeds the lot side {lot:.2f} m")
    rng = np.random.default_rng(seed)
    p, w, n = spec.street_pitch, spec.street_width, spec.lots_per_side
    k = int(math.ceil(spec.extent / p))
    lines = np.arange(-k, k + 1) * p
    e = k * p
    streets = [((x, -e), (x, e)) for x in lines] + [((-e, y), (e, y)) for y in lines]
    buildings = []
    if b > 0:
        slack = lot - b
        for bx in lines[:-1]:
            for by in lines[:-1]:
                for i in range(n):
                    for j in range(n):
                        x0 = bx + w / 2 + i * lot + slack / 2
                        y0 = by + w / 2 + j * lot + slack / 2
                        if spec.jitter > 0:
                            x0 += rng.uniform(-0.5, 0.5) * slack * spec.jitter
                            y0 += rng.uniform(-0.5, 0.5) * slack * spec.jitter
                        if spec.height_mode == "constant":
                            h = spec.height_median
                        else:
                            h = spec.height_median * math.exp(spec.height_sigma * rng.standard_normal())
                        known = rng.random() >= spec.missing_height_fraction
                        ring = ((x0, y0), (x0 + b, y0), (x0 + b, y0 + b), (x0, y0 + b))
                        buildings.append(Building(ring, round(h, 3) if known else 0.0, known))
    bs = BaseStation(spec.bs_id, (0.0, 0.0), spec.bs_height_agl, 0.0)
    scene = Scene(tuple(buildings), _terrain(spec), StreetNetwork(tuple(streets)), (bs,))
    if out_dir is not None:
        write_scene(out_dir, scene)
    return scene


def slab_row_scene(bs_height=25.0, slab_height=10.0, slab_near=50.0, slab_depth=10.0,
                   street_x=0.0, street_length=400.0, half_width=200.0) -> Scene:
    """A BS at the origin, one wall of equal-height slabs across the y axis, and
    one straight street along x = street_x running away from the BS."""
    ring = ((-half_width, slab_near), (half_width, slab_near),
            (half_width, slab_near + slab_depth), (-half_width, slab_near + slab_depth))
    streets = StreetNetwork((((street_x, 1.0), (street_x, street_length)),))
    bs = BaseStation("slab", (0.0, 0.0), bs_height, 0.0)
    return Scene((Building(ring, slab_height),), None, streets, (bs,))


def shadow_end(bs_height, slab_height, slab_far) -> float:
    """Ground distance where the shadow of a wall whose far face is at ``slab_far`` ends."""
    return bs_height * slab_far / (bs_height - slab_height)


# ---------------------------------------------------------------------------
# multi-cell corpus

ENV_TEMPLATES = {
    "RMa": dict(coverage=0.05, height_median=6.0),
    "SMa": dict(coverage=0.25, height_median=6.5),
    "UMa": dict(coverage=0.35, height_median=15.0),
    "MetMa": dict(coverage=0.45, height_median=38.0),
}


def corpus_specs(n_cells: int, seed: int = 0, missing_cell_fraction: float = 0.1,
                 extent: float = 1100.0):
    """Randomised city specs cycling through the four environment templates."""
    rng = np.random.default_rng(seed)
    names = list(ENV_TEMPLATES)
    out = []
    for c in range(n_cells):
        tpl = ENV_TEMPLATES[names[c % len(names)]]
        pitch = float(rng.uniform(80.0, 140.0))
        cov = float(np.clip(tpl["coverage"] * rng.uniform(0.8, 1.2), 0.01, 0.6))
        spec = SyntheticCitySpec(
            street_pitch=round(pitch, 2),
            street_width=round(float(rng.uniform(12.0, 24.0)), 2),
            lots_per_side=int(rng.integers(1, 4)),
            coverage=round(cov, 4),
            height_mode="lognormal",
            height_median=round(tpl["height_median"] * float(rng.uniform(0.85, 1.15)), 3),
            height_sigma=0.3,
            missing_height_fraction=0.3 if rng.random() < missing_cell_fraction else 0.0,
            jitter=float(rng.uniform(0.0, 1.0)),
            slope=tuple(float(v) for v in rng.normal(0.0, 0.005, 2)),
            extent=extent,
            bs_id=f"cell{c:04d}",
        )
        while spec.building_side > spec.lot_side:  # shrink lots until the coverage fits
            spec = SyntheticCitySpec(**{**asdict(spec), "lots_per_side": spec.lots_per_side - 1})
        out.append((names[c % len(names)], spec))
    return out


def generate_corpus(out_dir, n_cells: int, seed: int = 0, **kw) -> list:
    """Write one scene directory per cell plus ``corpus.json`` listing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(n_cells)
    cells = []
    for (env, spec), ss in zip(corpus_specs(n_cells, seed, **kw), seeds):
        generate_city(spec, int(ss.generate_state(1)[0]), out_dir / spec.bs_id)
        cells.append({"dir": spec.bs_id, "template": env, "spec": asdict(spec)})
    (out_dir / "corpus.json").write_text(json.dumps({"seed": seed, "cells": cells}, indent=1) + "\n")
    return cells
