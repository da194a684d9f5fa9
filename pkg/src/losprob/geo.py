"""Geospatial domain types, scene file I/O and the uniform-grid building index.

Coordinates are planar meters. Building footprints given in lon/lat are
projected with a local equirectangular projection around the origin stored
in the buildings file header.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import shapely
from shapely.geometry import Polygon

log = logging.getLogger(__name__)

EARTH_RADIUS = 6_371_008.8

# Counts of recoverable anomalies (clamped terrain lookups, clamped CDF inputs, ...).
warning_counts: Counter = Counter()


class SceneFormatError(ValueError):
    """Raised when a scene file cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite coordinate in {self}")


def polygon_area(coords) -> float:
    """Signed shoelace area; positive for counter-clockwise rings."""
    xy = np.asarray(coords, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(coords) -> tuple[float, float]:
    xy = np.asarray(coords, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if a == 0.0:
        return float(x.mean()), float(y.mean())
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return float(cx), float(cy)


@dataclass(frozen=True)
class Building:
    """A footprint polygon (open ring, no repeated closing vertex) and a height.

    When ``has_height`` is false the height is unknown; ``height`` is then 0
    and must not be read as a real value.
    """

    footprint: tuple[tuple[float, float], ...]
    height: float = 0.0
    has_height: bool = True

    def __post_init__(self):
        ring = [tuple(map(float, p)) for p in self.footprint]
        if len(ring) >= 2 and ring[0] == ring[-1]:
            ring = ring[:-1]
        if len(ring) < 3:
            raise ValueError("footprint needs at least 3 distinct vertices")
        if not self.has_height:
            object.__setattr__(self, "height", 0.0)
        elif not (self.height >= 0.0 and math.isfinite(self.height)):
            raise ValueError(f"invalid building height {self.height!r}")
        object.__setattr__(self, "footprint", tuple(ring))

    @property
    def area(self) -> float:
        return abs(polygon_area(self.footprint))

    @property
    def centroid(self) -> tuple[float, float]:
        return polygon_centroid(self.footprint)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        xy = np.asarray(self.footprint)
        return (xy[:, 0].min(), xy[:, 1].min(), xy[:, 0].max(), xy[:, 1].max())

    def polygon(self) -> Polygon:
        return Polygon(self.footprint)

    def is_simple(self) -> bool:
        return self.polygon().is_valid


@dataclass(frozen=True)
class TerrainGrid:
    """Node-based elevation raster.

    ``elevations[j, i]`` is the elevation at ``(origin_x + i*cell_size,
    origin_y + j*cell_size)``.
    """

    origin: tuple[float, float]
    cell_size: float
    elevations: np.ndarray

    def __post_init__(self):
        elev = np.ascontiguousarray(self.elevations, dtype=float)
        if elev.ndim != 2 or min(elev.shape) < 1:
            raise ValueError("elevations must be a non-empty 2D array")
        if not np.all(np.isfinite(elev)):
            raise ValueError("terrain elevations must be finite")
        if not self.cell_size > 0:
            raise ValueError("cell_size must be positive")
        elev.setflags(write=False)
        object.__setattr__(self, "elevations", elev)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def flat(cls, elevation=0.0, origin=(-1e6, -1e6), extent=2e6):
        return cls(origin, extent, np.full((2, 2), float(elevation)))

    @property
    def shape(self):
        return self.elevations.shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        ny, nx = self.shape
        x0, y0 = self.origin
        return (x0, y0, x0 + (nx - 1) * self.cell_size, y0 + (ny - 1) * self.cell_size)

    @cached_property
    def is_flat(self) -> bool:
        return bool(self.elevations.min() == self.elevations.max())


def terrain_elevation(grid: TerrainGrid | None, p) -> float:
    """Bilinear interpolation of the terrain at the 2D point ``p``.

    Points outside the raster are clamped to the nearest edge; each such
    lookup bumps ``warning_counts['terrain_clamp']``.
    """
    if grid is None:
        return 0.0
    x, y = float(p[0]), float(p[1])
    x0, y0, x1, y1 = grid.extent
    if not (x0 <= x <= x1 and y0 <= y <= y1):
        warning_counts["terrain_clamp"] += 1
        log.debug("terrain lookup (%g, %g) outside extent, clamped", x, y)
    return float(_bilinear(grid, np.array([x]), np.array([y]))[0])


def _bilinear(grid: TerrainGrid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    elev = grid.elevations
    ny, nx = elev.shape
    fx = np.clip((x - grid.origin[0]) / grid.cell_size, 0.0, nx - 1)
    fy = np.clip((y - grid.origin[1]) / grid.cell_size, 0.0, ny - 1)
    i = np.minimum(np.floor(fx).astype(int), max(nx - 2, 0))
    j = np.minimum(np.floor(fy).astype(int), max(ny - 2, 0))
    tx = fx - i
    ty = fy - j
    i1 = np.minimum(i + 1, nx - 1)
    j1 = np.minimum(j + 1, ny - 1)
    return ((1 - tx) * (1 - ty) * elev[j, i] + tx * (1 - ty) * elev[j, i1]
            + (1 - tx) * ty * elev[j1, i] + tx * ty * elev[j1, i1])


@dataclass(frozen=True)
class BaseStation:
    id: str
    position: tuple[float, float]
    height_agl: float
    ground_elevation: float = 0.0

    def __post_init__(self):
        if not self.height_agl > 0:
            raise ValueError(f"BS {self.id}: height_agl must be > 0")
        object.__setattr__(self, "position", (float(self.position[0]), float(self.position[1])))

    @property
    def antenna_z(self) -> float:
        return self.ground_elevation + self.height_agl


@dataclass(frozen=True)
class StreetNetwork:
    polylines: tuple[tuple[tuple[float, float], ...], ...] = ()

    def __post_init__(self):
        lines = tuple(tuple((float(x), float(y)) for x, y in pl) for pl in self.polylines)
        for k, pl in enumerate(lines):
            if len(pl) < 2:
                raise ValueError(f"street polyline {k} has fewer than 2 vertices")
        object.__setattr__(self, "polylines", lines)


@dataclass(frozen=True)
class BuildingArrays:
    """Flat array view of the buildings, the layout the tracing kernels use."""

    vx: np.ndarray
    vy: np.ndarray
    offsets: np.ndarray  # vertices of building b are vx[offsets[b]:offsets[b+1]]
    bbox: np.ndarray  # (n, 4) xmin, ymin, xmax, ymax
    top: np.ndarray  # base elevation + height
    blocks: np.ndarray  # has_height and height > 0


@dataclass(frozen=True)
class Scene:
    buildings: tuple[Building, ...] = ()
    terrain: TerrainGrid | None = None
    streets: StreetNetwork = field(default_factory=StreetNetwork)
    stations: tuple[BaseStation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        object.__setattr__(self, "stations", tuple(self.stations))

    def station(self, bs_id: str) -> BaseStation:
        for bs in self.stations:
            if bs.id == bs_id:
                return bs
        raise KeyError(bs_id)

    @cached_property
    def arrays(self) -> BuildingArrays:
        n = len(self.buildings)
        counts = np.array([len(b.footprint) for b in self.buildings], dtype=np.int64)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        if n:
            verts = np.concatenate([np.asarray(b.footprint, dtype=float) for b in self.buildings])
        else:
            verts = np.zeros((0, 2))
        x, y = verts[:, 0], verts[:, 1]
        bbox = np.zeros((n, 4))
        top = np.zeros(n)
        blocks = np.zeros(n, dtype=np.bool_)
        if n:
            starts = offsets[:-1]
            bbox = np.column_stack([np.minimum.reduceat(x, starts), np.minimum.reduceat(y, starts),
                                    np.maximum.reduceat(x, starts), np.maximum.reduceat(y, starts)])
            # next vertex within each ring, wrapping to the ring's first vertex
            nxt = np.arange(1, len(x) + 1)
            nxt[offsets[1:] - 1] = starts
            cross = x * y[nxt] - x[nxt] * y
            a = np.add.reduceat(cross, starts) / 2.0
            cx = np.add.reduceat((x + x[nxt]) * cross, starts)
            cy = np.add.reduceat((y + y[nxt]) * cross, starts)
            safe = a != 0.0
            cx = np.where(safe, cx / (6.0 * np.where(safe, a, 1.0)), np.add.reduceat(x, starts) / counts)
            cy = np.where(safe, cy / (6.0 * np.where(safe, a, 1.0)), np.add.reduceat(y, starts) / counts)
            base = (_bilinear(self.terrain, cx, cy) if self.terrain is not None
                    else np.zeros(n))
            h = np.array([b.height for b in self.buildings])
            known = np.array([b.has_height for b in self.buildings], dtype=np.bool_)
            top = base + h
            blocks = known & (h > 0)
        arrs = BuildingArrays(np.ascontiguousarray(verts[:, 0]), np.ascontiguousarray(verts[:, 1]),
                              offsets, bbox, top, blocks)
        for a in (arrs.vx, arrs.vy, arrs.offsets, arrs.bbox, arrs.top, arrs.blocks):
            a.setflags(write=False)
        return arrs


# ---------------------------------------------------------------------------
# spatial index


@dataclass(frozen=True)
class SpatialIndex:
    """Uniform grid over building bounding boxes, stored in CSR form.

    Cell ``(cx, cy)`` has flat id ``cy * nx + cx`` and holds building ids
    ``ids[start[c]:start[c + 1]]``. Bounding boxes are padded by ``PAD``
    meters on insertion so segments grazing a cell corner still see them.
    """

    origin: tuple[float, float]
    cell_size: float
    nx: int
    ny: int
    start: np.ndarray
    ids: np.ndarray

    PAD = 1e-6

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_members(self, cx: int, cy: int) -> np.ndarray:
        c = cy * self.nx + cx
        return self.ids[self.start[c]:self.start[c + 1]]

    def candidates(self, p0, p1) -> set[int]:
        """Ids of buildings whose padded bbox shares a grid cell with segment p0-p1."""
        from . import _kernels

        buf = np.empty(max(len(self.ids), 1), dtype=np.int64)
        n = _kernels.segment_candidates(
            float(p0[0]), float(p0[1]), float(p1[0]), float(p1[1]),
            self.origin[0], self.origin[1], self.cell_size, self.nx, self.ny,
            self.start, self.ids, buf)
        return set(buf[:n].tolist())


def build_index(scene: Scene, cell_size: float = 50.0) -> SpatialIndex:
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    arr = scene.arrays
    n = len(arr.bbox)
    if n == 0:
        return SpatialIndex((0.0, 0.0), float(cell_size), 1, 1,
                            np.zeros(2, dtype=np.int64), np.zeros(0, dtype=np.int64))
    pad = SpatialIndex.PAD
    x0 = float(arr.bbox[:, 0].min()) - 2 * pad
    y0 = float(arr.bbox[:, 1].min()) - 2 * pad
    nx = int(math.floor((arr.bbox[:, 2].max() + 2 * pad - x0) / cell_size)) + 1
    ny = int(math.floor((arr.bbox[:, 3].max() + 2 * pad - y0) / cell_size)) + 1
    ix0 = np.floor((arr.bbox[:, 0] - pad - x0) / cell_size).astype(np.int64).clip(0, nx - 1)
    iy0 = np.floor((arr.bbox[:, 1] - pad - y0) / cell_size).astype(np.int64).clip(0, ny - 1)
    ix1 = np.floor((arr.bbox[:, 2] + pad - x0) / cell_size).astype(np.int64).clip(0, nx - 1)
    iy1 = np.floor((arr.bbox[:, 3] + pad - y0) / cell_size).astype(np.int64).clip(0, ny - 1)
    spans = (ix1 - ix0 + 1) * (iy1 - iy0 + 1)
    owner = np.repeat(np.arange(n, dtype=np.int64), spans)
    # enumerate covered cells per building
    local = np.arange(spans.sum()) - np.repeat(np.cumsum(spans) - spans, spans)
    w = np.repeat(ix1 - ix0 + 1, spans)
    cx = np.repeat(ix0, spans) + local % w
    cy = np.repeat(iy0, spans) + local // w
    cell = cy * nx + cx
    order = np.lexsort((owner, cell))
    ids = owner[order]
    counts = np.bincount(cell, minlength=nx * ny)
    start = np.zeros(nx * ny + 1, dtype=np.int64)
    np.cumsum(counts, out=start[1:])
    start.setflags(write=False)
    ids.setflags(write=False)
    return SpatialIndex((x0, y0), float(cell_size), nx, ny, start, ids)


# ---------------------------------------------------------------------------
# file I/O


def _lonlat_to_xy(points, origin):
    lon0, lat0 = origin
    k = math.cos(math.radians(lat0))
    return [(math.radians(lon - lon0) * EARTH_RADIUS * k, math.radians(lat - lat0) * EARTH_RADIUS)
            for lon, lat in points]


def read_buildings(path) -> list[Building]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if isinstance(doc, list):
        doc = {"features": doc}
    units = doc.get("units", "meters")
    if units not in ("meters", "lonlat"):
        raise SceneFormatError(f"{path}: unknown units {units!r}")
    origin = doc.get("origin")
    if units == "lonlat" and origin is None:
        raise SceneFormatError(f"{path}: lonlat buildings need an 'origin' [lon, lat]")
    out = []
    for k, feat in enumerate(doc.get("features", [])):
        try:
            ring = feat["polygon"]
            if units == "lonlat":
                ring = _lonlat_to_xy(ring, origin)
            h = feat.get("height")
            bld = Building(tuple(map(tuple, ring)), float(h) if h is not None else 0.0, h is not None)
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"{path}: feature {k}: {exc}") from exc
        out.append(bld)
    bad = _invalid_footprints(out)
    if bad:
        raise SceneFormatError(f"{path}: feature {bad[0]}: footprint is self-intersecting")
    return out


def _invalid_footprints(buildings) -> list[int]:
    """Indices of footprints that are not valid simple polygons (vectorised by vertex count)."""
    by_len: dict[int, list[int]] = {}
    for k, b in enumerate(buildings):
        by_len.setdefault(len(b.footprint), []).append(k)
    bad = []
    for idx in by_len.values():
        rings = np.array([buildings[k].footprint for k in idx], dtype=float)
        ok = shapely.is_valid(shapely.polygons(rings))
        bad += [idx[i] for i in np.flatnonzero(~ok)]
    return sorted(bad)


def write_buildings(path, buildings) -> None:
    feats = []
    for b in buildings:
        feat = {"polygon": [list(p) for p in b.footprint]}
        if b.has_height:
            feat["height"] = b.height
        feats.append(feat)
    Path(path).write_text(json.dumps({"units": "meters", "features": feats}))


def read_terrain(path) -> TerrainGrid:
    path = Path(path)
    header = {}
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(header) < 5:
                if len(parts) != 2:
                    raise SceneFormatError(f"{path}: line {lineno}: expected 'key value' header")
                header[parts[0].lower()] = parts[1]
                continue
            try:
                values.extend(float(v) for v in parts)
            except ValueError as exc:
                raise SceneFormatError(f"{path}: line {lineno}: {exc}") from exc
    try:
        ox, oy = float(header["origin_x"]), float(header["origin_y"])
        cs = float(header["cell_size"])
        nx, ny = int(header["ncols"]), int(header["nrows"])
    except KeyError as exc:
        raise SceneFormatError(f"{path}: missing header field {exc}") from exc
    if len(values) != nx * ny:
        raise SceneFormatError(f"{path}: expected {nx * ny} elevations, found {len(values)}")
    return TerrainGrid((ox, oy), cs, np.array(values).reshape(ny, nx))


def write_terrain(path, grid: TerrainGrid) -> None:
    ny, nx = grid.shape
    lines = [f"origin_x {grid.origin[0]!r}", f"origin_y {grid.origin[1]!r}",
             f"cell_size {grid.cell_size!r}", f"ncols {nx}", f"nrows {ny}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid.elevations]
    Path(path).write_text("\n".join(lines) + "\n")


def read_streets(path) -> StreetNetwork:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    try:
        return StreetNetwork(tuple(tuple(tuple(p) for p in pl) for pl in doc))
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{path}: {exc}") from exc


def write_streets(path, streets: StreetNetwork) -> None:
    Path(path).write_text(json.dumps([[list(p) for p in pl] for pl in streets.polylines]))


STATION_COLUMNS = ["id", "x", "y", "height_agl", "ground_elevation"]


def read_stations(path) -> list[BaseStation]:
    path = Path(path)
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(STATION_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise SceneFormatError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            try:
                out.append(BaseStation(row["id"], (float(row["x"]), float(row["y"])),
                                       float(row["height_agl"]), float(row["ground_elevation"])))
            except ValueError as exc:
                raise SceneFormatError(f"{path}: line {reader.line_num}: {exc}") from exc
    ids = [bs.id for bs in out]
    if len(set(ids)) != len(ids):
        raise SceneFormatError(f"{path}: duplicate station ids")
    return out


def write_stations(path, stations) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STATION_COLUMNS)
        for bs in stations:
            w.writerow([bs.id, repr(bs.position[0]), repr(bs.position[1]),
                        repr(bs.height_agl), repr(bs.ground_elevation)])


SCENE_FILES = {"buildings": "buildings.json", "terrain": "terrain.txt",
               "streets": "streets.json", "stations": "stations.csv"}


def load_scene(buildings_path, terrain_path, streets_path, stations_path) -> Scene:
    return Scene(tuple(read_buildings(buildings_path)), read_terrain(terrain_path),
                 read_streets(streets_path), tuple(read_stations(stations_path)))


def load_scene_dir(directory) -> Scene:
    d = Path(directory)
    return load_scene(*(d / SCENE_FILES[k] for k in ("buildings", "terrain", "streets", "stations")))


def write_scene(directory, scene: Scene) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_buildings(d / SCENE_FILES["buildings"], scene.buildings)
    write_terrain(d / SCENE_FILES["terrain"], scene.terrain or TerrainGrid.flat())
    write_streets(d / SCENE_FILES["streets"], scene.streets)
    write_stations(d / SCENE_FILES["stations"], scene.stations)
