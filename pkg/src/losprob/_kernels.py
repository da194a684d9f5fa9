"""Compiled inner loops for ray tracing and index traversal.

The indexed and the brute-force tracer share ``_building_blocks``; they only
differ in which buildings they feed it, so their labels agree bit for bit
whenever the index returns a superset of the true intersectors.
"""
import math

import numba
import numpy as np

_EPS = 1e-7


@numba.njit(cache=True)
def segment_candidates(x0, y0, x1, y1, gox, goy, cs, nx, ny, start, ids, out):
    """Write ids of every building registered in a grid cell the segment touches.

    Cells are swept column by column; within each column the exact y-range
    of the segment (padded by a small epsilon) selects the rows. Ids may
    repeat across cells. Returns the number of ids written to ``out``.
    """
    if len(ids) == 0:
        return 0
    xmin, xmax = min(x0, x1), max(x0, x1)
    c_lo = int(math.floor((xmin - _EPS - gox) / cs))
    c_hi = int(math.floor((xmax + _EPS - gox) / cs))
    if c_hi < 0 or c_lo > nx - 1:
        return 0
    c_lo = max(c_lo, 0)
    c_hi = min(c_hi, nx - 1)
    dx = x1 - x0
    dy = y1 - y0
    n = 0
    for c in range(c_lo, c_hi + 1):
        cx0 = gox + c * cs
        cx1 = cx0 + cs
        if dx == 0.0:
            ya, yb = y0, y1
        else:
            xa = min(max(xmin, cx0), xmax)
            xb = max(min(xmax, cx1), xmin)
            ya = y0 + (xa - x0) * dy / dx
            yb = y0 + (xb - x0) * dy / dx
        ylo, yhi = min(ya, yb), max(ya, yb)
        r_lo = int(math.floor((ylo - _EPS - goy) / cs))
        r_hi = int(math.floor((yhi + _EPS - goy) / cs))
        if r_hi < 0 or r_lo > ny - 1:
            continue
        r_lo = max(r_lo, 0)
        r_hi = min(r_hi, ny - 1)
        for r in range(r_lo, r_hi + 1):
            cell = r * nx + c
            for k in range(start[cell], start[cell + 1]):
                out[n] = ids[k]
                n += 1
    return n


@numba.njit(cache=True)
def point_in_polygon(px, py, vx, vy, lo, hi):
    inside = False
    j = hi - 1
    for i in range(lo, hi):
        yi, yj = vy[i], vy[j]
        if (yi > py) != (yj > py):
            xc = (vx[j] - vx[i]) * (py - yi) / (yj - yi) + vx[i]
            if px < xc:
                inside = not inside
        j = i
    return inside


@numba.njit(cache=True)
def _bilinear(x, y, elev, ox, oy, cs):
    ny, nx = elev.shape
    fx = min(max((x - ox) / cs, 0.0), nx - 1.0)
    fy = min(max((y - oy) / cs, 0.0), ny - 1.0)
    i = min(int(math.floor(fx)), max(nx - 2, 0))
    j = min(int(math.floor(fy)), max(ny - 2, 0))
    tx = fx - i
    ty = fy - j
    i1 = min(i + 1, nx - 1)
    j1 = min(j + 1, ny - 1)
    return ((1 - tx) * (1 - ty) * elev[j, i] + tx * (1 - ty) * elev[j, i1]
            + (1 - tx) * ty * elev[j1, i] + tx * ty * elev[j1, i1])


@numba.njit(cache=True)
def _sample_t(i, m, step, length):
    # samples 1..m sit at arc length i*step; sample m+1 is the street point
    if i > m:
        return 1.0
    return (i * step) / length


@numba.njit(cache=True)
def _building_blocks(b, bx, by, bz, dx, dy, dz, length, m, step,
                     vx, vy, offsets, bbox, top, blocks):
    if not blocks[b]:
        return False
    xmin, ymin, xmax, ymax = bbox[b, 0], bbox[b, 1], bbox[b, 2], bbox[b, 3]
    # Liang-Barsky clip of the parametric segment against the bbox
    t0, t1 = 0.0, 1.0
    for p, q in ((-dx, bx - xmin), (dx, xmax - bx), (-dy, by - ymin), (dy, ymax - by)):
        if p == 0.0:
            if q < 0.0:
                return False
        else:
            r = q / p
            if p < 0.0:
                if r > t1:
                    return False
                t0 = max(t0, r)
            else:
                if r < t0:
                    return False
                t1 = min(t1, r)
    if length > 0.0:
        i_lo = max(int(math.floor(t0 * length / step)) - 1, 1)
        i_hi = min(int(math.ceil(t1 * length / step)) + 1, m + 1)
    else:
        i_lo, i_hi = m + 1, m + 1
    if t1 >= 1.0 - 1e-9:
        i_hi = m + 1
    lo, hi = offsets[b], offsets[b + 1]
    h = top[b]
    for i in range(i_lo, i_hi + 1):
        t = _sample_t(i, m, step, length)
        z = bz + t * dz
        if z >= h:
            continue
        px = bx + t * dx
        py = by + t * dy
        if px < xmin or px > xmax or py < ymin or py > ymax:
            continue
        if point_in_polygon(px, py, vx, vy, lo, hi):
            return True
    return False


@numba.njit(cache=True)
def _terrain_blocks(bx, by, bz, dx, dy, dz, m, step, length, elev, ox, oy, cs, flat):
    if flat:
        ground = elev[0, 0]
        # the ray is linear in t, so the interior minimum is at an endpoint sample
        if m >= 1:
            for i in (1, m):
                if bz + _sample_t(i, m, step, length) * dz < ground:
                    return True
        return False
    for i in range(1, m + 1):
        t = _sample_t(i, m, step, length)
        if bz + t * dz < _bilinear(bx + t * dx, by + t * dy, elev, ox, oy, cs):
            return True
    return False


@numba.njit(cache=True)
def trace_points(bx, by, bz, sx, sy, sz, step,
                 elev, ox, oy, cs, flat,
                 vx, vy, offsets, bbox, top, blocks,
                 use_index, gox, goy, gcs, gnx, gny, gstart, gids):
    """LOS label for each street point (sx[k], sy[k], sz[k]) seen from (bx, by, bz)."""
    n = len(sx)
    out = np.empty(n, dtype=np.bool_)
    buf = np.empty(max(len(gids), 1), dtype=np.int64)
    nb = len(top)
    for k in range(n):
        dx = sx[k] - bx
        dy = sy[k] - by
        dz = sz[k] - bz
        length = math.sqrt(dx * dx + dy * dy)
        m = int(math.floor(length / step))
        if m * step >= length:
            m -= 1
        if m < 0:
            m = 0
        los = not _terrain_blocks(bx, by, bz, dx, dy, dz, m, step, length,
                                  elev, ox, oy, cs, flat)
        if los:
            if use_index:
                nc = segment_candidates(bx, by, sx[k], sy[k], gox, goy, gcs, gnx, gny,
                                        gstart, gids, buf)
                for c in range(nc):
                    if _building_blocks(buf[c], bx, by, bz, dx, dy, dz, length, m, step,
                                        vx, vy, offsets, bbox, top, blocks):
                        los = False
                        break
            else:
                for b in range(nb):
                    if _building_blocks(b, bx, by, bz, dx, dy, dz, length, m, step,
                                        vx, vy, offsets, bbox, top, blocks):
                        los = False
                        break
        out[k] = los
    return out
