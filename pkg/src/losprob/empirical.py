"""Distance binning of LOS samples into empirical LOS probability curves."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .extract import CellLosData


@dataclass(frozen=True)
class LosBin:
    r_mean: float
    p_emp: float
    count: int


@dataclass(frozen=True)
class LosCurve:
    """Non-empty distance bins of one cell (or a pooled environment)."""

    source: str
    r: np.ndarray
    p: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        for name in ("r", "p", "count"):
            a = np.array(getattr(self, name), dtype=np.int64 if name == "count" else float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if np.any(np.diff(self.r) <= 0):
            raise ValueError("bin distances must be strictly increasing")

    def __len__(self):
        return len(self.r)

    @property
    def bins(self) -> list[LosBin]:
        return [LosBin(float(r), float(p), int(c)) for r, p, c in zip(self.r, self.p, self.count)]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0


def _bin(source, distance, is_los, bin_width, max_radius) -> LosCurve:
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    d = np.asarray(distance, dtype=float)
    v = np.asarray(is_los, dtype=float)
    keep = (d > 0) & (d <= max_radius)
    d, v = d[keep], v[keep]
    n_bins = int(np.ceil(max_radius / bin_width))
    # lower-inclusive [w*i, w*(i+1)); the outer edge max_radius joins the last bin
    idx = np.minimum(np.floor(d / bin_width).astype(np.int64), n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    rsum = np.bincount(idx, weights=d, minlength=n_bins)
    lsum = np.bincount(idx, weights=v, minlength=n_bins)
    nz = count > 0
    return LosCurve(source, rsum[nz] / count[nz], lsum[nz] / count[nz], count[nz])


def bin_samples(data: CellLosData, bin_width: float = 5.0, max_radius: float = 1000.0) -> LosCurve:
    return _bin(data.bs_id, data.distance, data.is_los, bin_width, max_radius)


def pool_cells(cells, env, bin_width: float = 5.0, max_radius: float = 1000.0) -> LosCurve:
    """Bin the concatenated raw samples of all ``cells`` as one typical cell."""
    cells = list(cells)
    if not cells:
        raise ValueError(f"no cells to pool for environment {env}")
    d = np.concatenate([c.distance for c in cells])
    v = np.concatenate([c.is_los for c in cells])
    return _bin(getattr(env, "value", str(env)), d, v, bin_width, max_radius)


CURVE_COLUMNS = ["source", "r_mean", "p_emp", "count"]


def write_curves_csv(path, curves) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for c in curves:
            for r, p, n in zip(c.r, c.p, c.count):
                w.writerow([c.source, repr(float(r)), repr(float(p)), int(n)])


def read_curves_csv(path) -> list[LosCurve]:
    rows: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.setdefault(row["source"], []).append(
                (float(row["r_mean"]), float(row["p_emp"]), int(row["count"])))
    return [LosCurve(src, [r[0] for r in recs], [r[1] for r in recs], [r[2] for r in recs])
            for src, recs in rows.items()]
