"""Street sampling and ground-level LOS labelling by 3D ray tracing."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .geo import BaseStation, Scene, SpatialIndex, StreetNetwork, TerrainGrid, _bilinear


@dataclass(frozen=True)
class ExtractConfig:
    radius: float = 1000.0
    spacing: float = 5.0
    ue_height: float = 0.0
    step: float = 1.0


@dataclass(frozen=True)
class LosSample:
    point: tuple[float, float]
    distance_2d: float
    is_los: bool


@dataclass
class CellLosData:
    """LOS samples of one cell, stored column-wise.

    ``samples`` materialises :class:`LosSample` records on demand; the arrays
    are what binning and I/O use.
    """

    bs_id: str
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    distance: np.ndarray = field(default_factory=lambda: np.zeros(0))
    is_los: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    ue_height: float = 0.0

    def __len__(self):
        return len(self.distance)

    @property
    def usable(self) -> bool:
        return len(self) > 0

    @property
    def samples(self) -> list[LosSample]:
        return [LosSample((float(x), float(y)), float(d), bool(v))
                for x, y, d, v in zip(self.x, self.y, self.distance, self.is_los)]

    @classmethod
    def from_samples(cls, bs_id, samples, ue_height=0.0):
        pts = np.array([s.point for s in samples], dtype=float).reshape(-1, 2)
        return cls(bs_id, pts[:, 0], pts[:, 1],
                   np.array([s.distance_2d for s in samples], dtype=float),
                   np.array([s.is_los for s in samples], dtype=bool), ue_height)


def sample_streets(streets: StreetNetwork, bs: BaseStation, radius: float = 1000.0,
                   spacing: float = 5.0) -> np.ndarray:
    """Points at arc-length multiples of ``spacing`` along every polyline.

    Each polyline also contributes its final vertex. Only points with
    ``0 < distance <= radius`` from the BS are kept. Returns an (n, 2) array.
    """
    if not (radius > 0 and spacing > 0):
        raise ValueError("radius and spacing must be positive")
    chunks = []
    for pl in streets.polylines:
        xy = np.asarray(pl, dtype=float)
        seg = np.hypot(*np.diff(xy, axis=0).T)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        total = cum[-1]
        n = int(np.floor(total / spacing + 1e-9))
        s = np.arange(n + 1) * spacing
        if total - s[-1] > 1e-9 * max(total, 1.0):
            s = np.append(s, total)
        s = np.minimum(s, total)
        chunks.append(np.column_stack([np.interp(s, cum, xy[:, 0]), np.interp(s, cum, xy[:, 1])]))
    if not chunks:
        return np.zeros((0, 2))
    pts = np.concatenate(chunks)
    d = np.hypot(pts[:, 0] - bs.position[0], pts[:, 1] - bs.position[1])
    return pts[(d > 0) & (d <= radius)]


def _terrain_args(terrain: TerrainGrid | None):
    if terrain is None:
        terrain = TerrainGrid.flat(0.0)
    return (terrain.elevations, terrain.origin[0], terrain.origin[1], terrain.cell_size,
            terrain.is_flat)


def trace_many(scene: Scene, index: SpatialIndex | None, bs: BaseStation, points,
               ue_height: float = 0.0, step: float = 1.0) -> np.ndarray:
    """LOS labels for an (n, 2) array of street points.

    With ``index=None`` every building is tested (the brute-force oracle).
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if ue_height < 0:
        raise ValueError("ue_height must be >= 0")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    terrain = scene.terrain
    ground = (_bilinear(terrain, pts[:, 0], pts[:, 1]) if terrain is not None
              else np.zeros(len(pts)))
    sz = ground + ue_height
    arr = scene.arrays
    if index is None:
        grid = (0.0, 0.0, 1.0, 1, 1, np.zeros(2, dtype=np.int64), np.zeros(0, dtype=np.int64))
    else:
        grid = (index.origin[0], index.origin[1], index.cell_size, index.nx, index.ny,
                index.start, index.ids)
    return _kernels.trace_points(
        bs.position[0], bs.position[1], bs.antenna_z,
        np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]), sz, float(step),
        *_terrain_args(terrain),
        arr.vx, arr.vy, arr.offsets, arr.bbox, arr.top, arr.blocks,
        index is not None, *grid)


def trace_los(scene: Scene, index: SpatialIndex | None, bs: BaseStation, street_point,
              ue_height: float = 0.0, step: float = 1.0) -> bool:
    return bool(trace_many(scene, index, bs, [street_point], ue_height, step)[0])


def extract_cell(scene: Scene, index: SpatialIndex | None, bs: BaseStation,
                 config: ExtractConfig = ExtractConfig()) -> CellLosData:
    pts = sample_streets(scene.streets, bs, config.radius, config.spacing)
    labels = trace_many(scene, index, bs, pts, config.ue_height, config.step)
    d = np.hypot(pts[:, 0] - bs.position[0], pts[:, 1] - bs.position[1])
    return CellLosData(bs.id, pts[:, 0].copy(), pts[:, 1].copy(), d, labels, config.ue_height)


LOS_COLUMNS = ["bs_id", "x", "y", "distance_2d", "is_los"]


def write_los_csv(path, cells) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOS_COLUMNS)
        for cell in cells:
            for x, y, d, v in zip(cell.x, cell.y, cell.distance, cell.is_los):
                w.writerow([cell.bs_id, repr(float(x)), repr(float(y)), repr(float(d)), int(v)])


def read_los_csv(path) -> list[CellLosData]:
    """Read a LOS sample CSV; cells come back in first-appearance order."""
    rows: dict[str, list] = {}
    with open(Path(path), newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(LOS_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            rows.setdefault(row["bs_id"], []).append(
                (float(row["x"]), float(row["y"]), float(row["distance_2d"]), row["is_los"] in ("1", "True", "true")))
    out = []
    for bs_id, recs in rows.items():
        a = np.array([r[:3] for r in recs], dtype=float).reshape(-1, 3)
        out.append(CellLosData(bs_id, a[:, 0], a[:, 1], a[:, 2],
                               np.array([r[3] for r in recs], dtype=bool)))
    return out
