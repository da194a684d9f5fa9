"""Fitting (U, W, F) to an empirical LOS curve.

A coarse grid over the feasible box seeds ``n_starts`` runs of projected
finite-difference gradient descent; the best end point wins. The objective
jumps whenever U crosses a bin distance, which is why a smooth local method
alone gets stuck and the grid seeding matters.
"""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .empirical import LosCurve
from .model import U_MAX, LosModelParams, p_los_array


class Metric(str, enum.Enum):
    MSE = "mse"
    MSLE = "msle"
    WMSE_R = "wmse-r"
    WMSE_INVP = "wmse-invp"


@dataclass(frozen=True)
class GridSpec:
    u_step: float = 5.0
    w_min: float = 5.0
    w_max: float = 5000.0
    n_w: int = 40
    f_step: float = 0.05

    def axes(self):
        U = np.arange(0.0, U_MAX + self.u_step / 2, self.u_step)
        W = np.geomspace(self.w_min, self.w_max, self.n_w)
        F = np.round(np.arange(0.0, 1.0 + self.f_step / 2, self.f_step), 12)
        return U, W, F


@dataclass(frozen=True)
class FitConfig:
    metric: Metric = Metric.MSLE
    epsilon: float = 0.05
    n_starts: int = 10
    grid: GridSpec = field(default_factory=GridSpec)
    log_floor: float = 1e-3
    fd_rel_step: float = 1e-4
    max_iter: int = 500
    tol: float = 1e-14
    nsse_threshold: float = 0.2
    fixed_F: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")


@dataclass(frozen=True)
class FitResult:
    params: LosModelParams
    objective: float
    mse_linear: float
    nsse: float
    is_outlier: bool
    source: str = ""


def _weights(curve: LosCurve, config: FitConfig) -> np.ndarray:
    if config.metric is Metric.WMSE_R:
        return curve.r.copy()
    if config.metric is Metric.WMSE_INVP:
        return 1.0 / (curve.p + config.epsilon)
    return np.ones(len(curve))


def fit_metric(curve: LosCurve, params: LosModelParams, config: FitConfig = FitConfig()) -> float:
    """Value of the configured error metric for ``params`` on ``curve``."""
    if curve.is_empty:
        raise ValueError("cannot evaluate a metric on an empty curve")
    model = p_los_array(params.U, params.W, params.F, curve.r)
    if config.metric is Metric.MSLE:
        fl = config.log_floor
        resid = np.log(np.maximum(curve.p, fl)) - np.log(np.maximum(model, fl))
    else:
        resid = curve.p - model
    return float(np.mean(_weights(curve, config) * resid ** 2))


def mse(curve: LosCurve, params: LosModelParams, r_min: float | None = None) -> float:
    """Plain linear MSE, optionally restricted to bins with r_mean > r_min."""
    sel = np.ones(len(curve), bool) if r_min is None else curve.r > r_min
    if not sel.any():
        raise ValueError("no bins in the requested range")
    model = p_los_array(params.U, params.W, params.F, curve.r[sel])
    return float(np.mean((curve.p[sel] - model) ** 2))


def nsse(curve: LosCurve, params: LosModelParams) -> float:
    denom = float(np.sum(curve.p ** 2)) if len(curve) else 0.0
    if denom == 0.0:
        raise ValueError("NSSE undefined: every empirical probability is zero")
    model = p_los_array(params.U, params.W, params.F, curve.r)
    return float(np.sum((curve.p - model) ** 2)) / denom


def flag_outlier(result: FitResult, threshold: float = 0.2) -> bool:
    return result.nsse > threshold


# ---------------------------------------------------------------------------
# compiled objective


@numba.njit(cache=True)
def _model(U, W, F, r):
    if r <= U:
        return 1.0
    e = math.exp(-r / W) if W > 0.0 else 0.0
    return F * ((U / r) * (1.0 - e) + e)


@numba.njit(cache=True)
def _objective(U, W, F, r, target, w, log_mode, log_floor):
    s = 0.0
    for i in range(len(r)):
        m = _model(U, W, F, r[i])
        if log_mode:
            m = math.log(max(m, log_floor))
        d = target[i] - m
        s += w[i] * d * d
    return s / len(r)


@numba.njit(cache=True)
def _objective_grid(Us, Ws, Fs, r, target, w, log_mode, log_floor):
    nb = len(r)
    out = np.empty((len(Us), len(Ws), len(Fs)))
    g = np.empty(nb)
    lfloor = math.log(log_floor)
    lF = np.empty(len(Fs))
    for c in range(len(Fs)):
        lF[c] = math.log(Fs[c]) if Fs[c] > 0.0 else -np.inf
    inside = 0.0 if log_mode else 1.0
    for a in range(len(Us)):
        U = Us[a]
        # bins with r <= U see probability 1 whatever W and F are
        k = 0
        head = 0.0
        while k < nb and r[k] <= U:
            d = target[k] - inside
            head += w[k] * d * d
            k += 1
        for b in range(len(Ws)):
            W = Ws[b]
            for i in range(k, nb):
                e = math.exp(-r[i] / W) if W > 0.0 else 0.0
                g[i] = (U / r[i]) * (1.0 - e) + e
                if log_mode:
                    g[i] = math.log(g[i]) if g[i] > 0.0 else -np.inf
            for c in range(len(Fs)):
                s = head
                if log_mode:
                    for i in range(k, nb):
                        d = target[i] - max(lF[c] + g[i], lfloor)
                        s += w[i] * d * d
                else:
                    F = Fs[c]
                    for i in range(k, nb):
                        d = target[i] - F * g[i]
                        s += w[i] * d * d
                out[a, b, c] = s / nb
    return out


class _Objective:
    def __init__(self, curve: LosCurve, config: FitConfig):
        self.r = np.ascontiguousarray(curve.r)
        self.w = _weights(curve, config)
        self.log_mode = config.metric is Metric.MSLE
        self.floor = config.log_floor
        self.target = np.log(np.maximum(curve.p, self.floor)) if self.log_mode else curve.p.copy()

    def __call__(self, x) -> float:
        return _objective(x[0], x[1], x[2], self.r, self.target, self.w, self.log_mode, self.floor)

    def grid(self, U, W, F) -> np.ndarray:
        return _objective_grid(U, W, F, self.r, self.target, self.w, self.log_mode, self.floor)


# ---------------------------------------------------------------------------
# optimiser

_LOWER = np.array([0.0, 0.0, 0.0])
_UPPER = np.array([U_MAX, np.inf, 1.0])
_STEP_FLOOR = np.array([1.0, 1.0, 0.01])


@numba.njit(cache=True)
def _eval(x, r, target, w, log_mode, log_floor):
    return _objective(x[0], x[1], x[2], r, target, w, log_mode, log_floor)


@numba.njit(cache=True)
def _fd_gradient(x, fx, rel, free, r, target, w, log_mode, log_floor):
    g = np.zeros(3)
    for j in range(3):
        if not free[j]:
            continue
        h = rel * max(abs(x[j]), _STEP_FLOOR[j])
        up = x.copy()
        dn = x.copy()
        up[j] = min(x[j] + h, _UPPER[j])
        dn[j] = max(x[j] - h, _LOWER[j])
        fu = _eval(up, r, target, w, log_mode, log_floor) if up[j] != x[j] else fx
        fd = _eval(dn, r, target, w, log_mode, log_floor) if dn[j] != x[j] else fx
        g[j] = (fu - fd) / (up[j] - dn[j])
    return g


@numba.njit(cache=True)
def _descend(x0, free, max_iter, tol, rel, r, target, w, log_mode, log_floor):
    x = x0.copy()
    fx = _eval(x, r, target, w, log_mode, log_floor)
    scale = np.empty(3)
    for j in range(3):
        scale[j] = max(abs(x[j]), _STEP_FLOOR[j] * (100.0 if j == 2 else 10.0))
    g = _fd_gradient(x, fx, rel, free, r, target, w, log_mode, log_floor) * scale
    H = np.eye(3)
    eye = np.eye(3)
    for _ in range(max_iter):
        if not np.all(np.isfinite(g)):
            break
        # bound-active variables whose gradient points outward stay put
        move = np.zeros(3, dtype=np.bool_)
        for j in range(3):
            pinned = (x[j] <= _LOWER[j] and g[j] > 0) or (x[j] >= _UPPER[j] and g[j] < 0)
            move[j] = free[j] and not pinned
        if not move.any():
            break
        gm = np.where(move, g, 0.0)
        d = -(H @ gm)
        for j in range(3):
            if not move[j]:
                d[j] = 0.0
        if not (gm @ d < 0.0):
            H = eye.copy()
            d = -gm
        step = 1.0
        accepted = False
        xn = x.copy()
        fn = fx
        for _ in range(60):
            for j in range(3):
                v = x[j] + step * d[j] * scale[j]
                xn[j] = min(max(v, _LOWER[j]), _UPPER[j]) if free[j] else x[j]
            fn = _eval(xn, r, target, w, log_mode, log_floor)
            if fn < fx:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if np.all(H == eye):
                break
            H = eye.copy()
            continue
        gn = _fd_gradient(xn, fn, rel, free, r, target, w, log_mode, log_floor) * scale
        s = (xn - x) / scale
        y = gn - g
        sy = s @ y
        if sy > 1e-12 * np.sqrt((s @ s) * (y @ y)) and sy > 0.0:
            rho = 1.0 / sy
            V = eye - rho * np.outer(s, y)
            H = V @ H @ V.T + rho * np.outer(s, s)
        improvement = fx - fn
        x = xn.copy()
        fx = fn
        g = gn
        if improvement < tol:
            break
    return x, fx


def descend(obj: _Objective, x0, config: FitConfig, free=(True, True, True)):
    """Projected descent from ``x0`` with central-difference gradients.

    The search direction is the gradient preconditioned by a BFGS estimate of
    the inverse Hessian over the variables not pinned at a bound; the step
    is halved until the objective decreases. Coordinates are scaled by the
    start point's magnitude. Returns (x, f(x)).
    """
    return _descend(np.asarray(x0, float), np.asarray(free, np.bool_), config.max_iter,
                    config.tol, config.fd_rel_step, obj.r, obj.target, obj.w,
                    obj.log_mode, obj.floor)


def grid_seeds(obj: _Objective, config: FitConfig) -> list[tuple[np.ndarray, float]]:
    """The ``n_starts`` best grid points.

    Ties prefer larger U, then F, then W. A point with the same U and F and
    an identical objective as an already chosen seed lies on a plateau in W
    (the decaying term has vanished) and is skipped.
    """
    U, W, F = config.grid.axes()
    if config.fixed_F is not None:
        F = np.array([float(config.fixed_F)])
    vals = obj.grid(U, W, F)
    a, b, c = np.meshgrid(np.arange(len(U)), np.arange(len(W)), np.arange(len(F)), indexing="ij")
    order = np.lexsort((-b.ravel(), -c.ravel(), -a.ravel(), vals.ravel()))
    seeds = []
    seen = set()
    for k in order:
        i, j, l = a.flat[k], b.flat[k], c.flat[k]
        v = float(vals.flat[k])
        key = (i, l, v)
        if key in seen:
            continue
        seen.add(key)
        seeds.append((np.array([U[i], W[j], F[l]]), v))
        if len(seeds) == config.n_starts:
            break
    return seeds


def _interval_mid(r, k):
    """Midpoint of the k-th gap between consecutive bin distances (0 and U_MAX close the ends)."""
    edges = np.concatenate([[0.0], r[r < U_MAX], [U_MAX]])
    k = min(max(k, 0), len(edges) - 2)
    return 0.5 * (edges[k] + edges[k + 1])


def refine(obj: _Objective, x0, config: FitConfig, free=(True, True, True), max_hops=200,
           reach=3):
    """Descend, then try moving U into the neighbouring gaps between bins.

    Crossing a bin distance makes the objective jump, which a local gradient
    never sees; each hop restarts the descent one gap over and is kept only
    if it lowers the objective.
    """
    x, fx = descend(obj, x0, config, free)
    r = obj.r
    for _ in range(max_hops):
        k = int(np.searchsorted(r, x[0], side="right"))
        best = None
        for kk in [k + o for o in range(-reach, reach + 1) if o]:
            if kk < 0 or kk > len(r[r < U_MAX]):
                continue
            start = x.copy()
            start[0] = _interval_mid(r, kk)
            xn, fn = descend(obj, start, config, free)
            if fn < fx and (best is None or fn < best[1]):
                best = (xn, fn)
        if best is None:
            break
        x, fx = best
    return x, fx


def fit_cell(curve: LosCurve, config: FitConfig = FitConfig()) -> FitResult:
    if len(curve) < 3:
        raise ValueError(f"curve {curve.source!r} has {len(curve)} bins; at least 3 are needed")
    obj = _Objective(curve, config)
    free = (True, True, config.fixed_F is None)
    best_x, best_f = None, math.inf
    for x0, _ in grid_seeds(obj, config):
        x, fx = refine(obj, x0, config, free)
        if fx < best_f:
            best_x, best_f = x, fx
    params = LosModelParams(float(best_x[0]), float(best_x[1]), float(best_x[2]))
    try:
        ns = nsse(curve, params)
    except ValueError:
        ns = math.inf
    return FitResult(params, float(best_f), mse(curve, params), ns,
                     ns > config.nsse_threshold, curve.source)


def fit_d1d2(curve: LosCurve, config: FitConfig = FitConfig()) -> FitResult:
    """The two-parameter d1/d2 fit: the same machinery with F pinned to 1."""
    return fit_cell(curve, replace(config, fixed_F=1.0))


FIT_COLUMNS = ["bs_id", "env", "U", "W", "F", "objective", "mse_linear", "nsse", "is_outlier"]


def write_fits_csv(path, rows) -> None:
    """``rows`` are (env_name, FitResult) pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIT_COLUMNS)
        for env, res in rows:
            p = res.params
            w.writerow([res.source, env, repr(p.U), repr(p.W), repr(p.F), repr(res.objective),
                        repr(res.mse_linear), repr(res.nsse), int(res.is_outlier)])


def read_fits_csv(path) -> list[tuple[str, FitResult]]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            params = LosModelParams(float(row["U"]), float(row["W"]), float(row["F"]))
            out.append((row["env"], FitResult(params, float(row["objective"]), float(row["mse_linear"]),
                                              float(row["nsse"]), row["is_outlier"] in ("1", "True"),
                                              row["bs_id"])))
    return out
