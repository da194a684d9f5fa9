"""Per-cell building statistics, reliability filtering and environment classes."""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
from shapely.geometry import Point

from .geo import BaseStation, Scene

log = logging.getLogger(__name__)

RURAL_COVERAGE = 0.10
HEIGHT_EDGES = (2.0, 10.0, 25.0)


class EnvClass(str, enum.Enum):
    RMA = "RMa"
    SMA = "SMa"
    UMA = "UMa"
    METMA = "MetMa"

    @property
    def rank(self) -> int:
        return list(EnvClass).index(self)

    @classmethod
    def parse(cls, name: str) -> "EnvClass":
        for env in cls:
            if env.value.lower() == name.lower():
                return env
        raise ValueError(f"unknown environment {name!r}")


@dataclass(frozen=True)
class CellStats:
    avg_building_height: float = 0.0
    building_coverage: float = 0.0
    height_to_footprint_ratio: float = 1.0
    n_footprints: int = 0


def cell_stats(scene: Scene, bs: BaseStation, radius: float = 1000.0) -> CellStats:
    """Building statistics over footprints intersecting the disk around ``bs``.

    Coverage uses footprint area clipped to the disk. The average height only
    counts footprints with a known height.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if not scene.buildings:
        return CellStats()
    arr = scene.arrays
    bx, by = bs.position
    # nearest point of each bbox to the BS
    nx_ = np.clip(bx, arr.bbox[:, 0], arr.bbox[:, 2])
    ny_ = np.clip(by, arr.bbox[:, 1], arr.bbox[:, 3])
    near = np.flatnonzero(np.hypot(nx_ - bx, ny_ - by) <= radius)
    disk = Point(bx, by).buffer(radius, quad_segs=512)
    disk_area = math.pi * radius * radius
    area = 0.0
    heights = []
    n_with = 0
    n = 0
    for b in near:
        bld = scene.buildings[b]
        xy = np.asarray(bld.footprint)
        far = np.hypot(xy[:, 0] - bx, xy[:, 1] - by).max()
        if far <= radius:
            a = bld.area
        else:
            poly = bld.polygon()
            if not poly.intersects(disk):
                continue
            a = poly.intersection(disk).area
        n += 1
        area += a
        if bld.has_height:
            n_with += 1
            heights.append(bld.height)
    if n == 0:
        return CellStats()
    return CellStats(float(np.mean(heights)) if heights else 0.0,
                     min(area / disk_area, 1.0), n_with / n, n)


def classify(stats: CellStats) -> EnvClass:
    """Lower-inclusive height bands; any cell below 10% coverage is rural."""
    h = stats.avg_building_height
    if stats.building_coverage < RURAL_COVERAGE:
        return EnvClass.RMA
    if h < HEIGHT_EDGES[1]:
        return EnvClass.SMA
    if h < HEIGHT_EDGES[2]:
        return EnvClass.UMA
    return EnvClass.METMA


def filter_reliable(cells, threshold: float = 0.90):
    """Split ``(CellStats, payload)`` pairs into (kept, dropped) by height-to-footprint ratio."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    kept, dropped = [], []
    for item in cells:
        (kept if item[0].height_to_footprint_ratio >= threshold else dropped).append(item)
    log.info("reliability filter %.2f: kept %d, dropped %d", threshold, len(kept), len(dropped))
    return kept, dropped


CELL_COLUMNS = ["bs_id", "avg_height", "coverage", "ratio", "class", "kept_flag"]


@dataclass(frozen=True)
class CellRecord:
    bs_id: str
    stats: CellStats
    env: EnvClass
    kept: bool


def write_cells_csv(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_COLUMNS)
        for r in records:
            w.writerow([r.bs_id, repr(r.stats.avg_building_height), repr(r.stats.building_coverage),
                        repr(r.stats.height_to_footprint_ratio), r.env.value, int(r.kept)])


def read_cells_csv(path) -> list[CellRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            stats = CellStats(float(row["avg_height"]), float(row["coverage"]), float(row["ratio"]))
            out.append(CellRecord(row["bs_id"], stats, EnvClass.parse(row["class"]),
                                  row["kept_flag"] in ("1", "True", "true")))
    return out
