"""Correlated (U, W, F) draws through a Gaussian copula.

The correlation matrix is applied to the Gaussian stage only: X = L Z with
R = L L^T, then each X_i goes through the standard normal CDF and the
inverse CDF of its marginal. Pearson correlations of the transformed
triplets therefore differ from R in general; only corr(X) tracks R.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .distfit import EnvParamModel, ParamDistribution, nearest_psd_correlation
from .geo import warning_counts
from .model import U_MAX, D1D2Params, LosModelParams

U_EPS = 1e-12
_MAX_ITER = 200
_YTOL = 1e-13


def cholesky(R) -> np.ndarray:
    """Lower-triangular L with L L^T = R, tolerating zero pivots of a PSD matrix."""
    R = np.asarray(R, dtype=float)
    n = R.shape[0]
    if R.shape != (n, n) or not np.allclose(R, R.T, atol=1e-12):
        raise ValueError("R must be a symmetric square matrix")
    L = np.zeros_like(R)
    for j in range(n):
        d = R[j, j] - L[j, :j] @ L[j, :j]
        if d < -1e-10:
            raise ValueError(f"matrix is not positive semidefinite (pivot {j} = {d:.3g})")
        L[j, j] = math.sqrt(max(d, 0.0))
        for i in range(j + 1, n):
            s = R[i, j] - L[i, :j] @ L[j, :j]
            if L[j, j] > 1e-15:
                L[i, j] = s / L[j, j]
            elif abs(s) > 1e-8:
                raise ValueError("matrix is not positive semidefinite (inconsistent zero pivot)")
    return L


# ---------------------------------------------------------------------------
# inverse CDF


def _tails(dist: ParamDistribution):
    """Return (to_x, lower, upper, lo0, hi0) for root finding on a transformed axis y.

    ``lower(y)`` gives (log P, d log P / dy) and ``upper(y)`` gives
    (log Q, d log Q / dy) with Q = 1 - P, both evaluated without forming 1 - P.
    """
    p = dist.params
    fam = dist.family
    with np.errstate(all="ignore"):
        if fam == "gamma":
            k, th = p["k"], p["theta"]
            lg = special.gammaln(k)
            dens = lambda y: np.exp(k * y - np.exp(y) - lg)  # dP/dy with x = theta e^y

            def lower(y):
                P = special.gammainc(k, np.exp(y))
                return np.log(P), dens(y) / P

            def upper(y):
                Q = special.gammaincc(k, np.exp(y))
                return np.log(Q), -dens(y) / Q

            return (lambda y: th * np.exp(y)), lower, upper, (-745.0, 709.0)
        if fam == "beta":
            a, b = p["alpha"], p["beta"]
            lb = special.betaln(a, b)
            dens = lambda y: np.exp(a * special.log_expit(y) + b * special.log_expit(-y) - lb)

            def lower(y):
                P = special.betainc(a, b, special.expit(y))
                return np.log(P), dens(y) / P

            def upper(y):
                Q = special.betainc(b, a, special.expit(-y))
                return np.log(Q), -dens(y) / Q

            return special.expit, lower, upper, (-745.0, 745.0)
        if fam == "gev":
            k, s, mu = p["k"], p["sigma"], p["mu"]
            if abs(k) < 1e-12:
                tail = lambda y: (np.exp(-y), np.exp(-y))
                lim = (-700.0, 1e300)
            else:
                def tail(y):
                    base = np.maximum(1.0 + k * y, 0.0)
                    t = np.where(base > 0, base ** (-1.0 / k), np.inf if k > 0 else 0.0)
                    return t, np.where(base > 0, base ** (-1.0 / k - 1.0), 0.0)
                lim = (-1.0 / k, 1e300) if k > 0 else (-1e300, -1.0 / k)

            def lower(y):
                t, dt = tail(y)
                return -t, dt

            def upper(y):
                t, dt = tail(y)
                Q = -np.expm1(-t)
                return np.log(Q), -np.exp(-t) * dt / Q

            return (lambda y: mu + s * y), lower, upper, lim
    raise ValueError(f"no numeric inverse for family {fam!r}")


def _solve(fun, target, lo_lim, hi_lim, sign):
    """Vectorised safeguarded Newton for sign*(fun(y) - target) = 0, increasing in y."""
    with np.errstate(all="ignore"):
        return _solve_inner(fun, target, lo_lim, hi_lim, sign)


def _solve_inner(fun, target, lo_lim, hi_lim, sign):
    n = len(target)
    g = lambda y: sign * (fun(y)[0] - target)
    lo = np.full(n, max(-1.0, lo_lim))
    hi = np.full(n, min(1.0, hi_lim))
    for _ in range(2000):
        bad = g(lo) > 0
        if not bad.any():
            break
        lo[bad] = np.maximum(np.where(lo[bad] < 0, 2 * lo[bad], lo[bad] - 1.0), lo_lim)
        if np.all(lo[bad] == lo_lim):
            break
    for _ in range(2000):
        bad = g(hi) < 0
        if not bad.any():
            break
        hi[bad] = np.minimum(np.where(hi[bad] > 0, 2 * hi[bad], hi[bad] + 1.0), hi_lim)
        if np.all(hi[bad] == hi_lim):
            break
    y = 0.5 * (lo + hi)
    y = np.where(np.isfinite(y), y, np.where(np.isfinite(lo), lo + 1.0, hi - 1.0))
    active = np.ones(n, dtype=bool)
    for _ in range(_MAX_ITER):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        yi = y[idx]
        v, dv = fun(yi)
        gi = sign * (v - target[idx])
        dgi = sign * dv
        below = gi < 0
        lo[idx] = np.where(below, yi, lo[idx])
        hi[idx] = np.where(below, hi[idx], yi)
        newton = yi - gi / dgi
        a, b = lo[idx], hi[idx]
        ok = np.isfinite(newton) & (newton > a) & (newton < b)
        mid = np.where(np.isfinite(a) & np.isfinite(b), 0.5 * (a + b), yi)
        ynew = np.where(ok, newton, mid)
        scale = np.maximum(1.0, np.abs(ynew))
        done = (np.abs(ynew - yi) <= _YTOL * scale) | ((b - a) <= _YTOL * scale) | (gi == 0)
        y[idx] = np.where(gi == 0, yi, ynew)
        active[idx[done]] = False
    return y


def inverse_cdf(dist: ParamDistribution, u):
    """Quantile function of a fitted marginal; scalar in, scalar out."""
    u_arr = np.atleast_1d(np.asarray(u, dtype=float)).copy()
    if np.isnan(u_arr).any():
        raise ValueError("u must not be NaN")
    out_range = (u_arr < U_EPS) | (u_arr > 1 - U_EPS)
    if out_range.any():
        warning_counts["u_clamp"] += int(out_range.sum())
        u_arr = np.clip(u_arr, U_EPS, 1 - U_EPS)
    fam = dist.family
    if fam == "uniform":
        x = u_arr
    elif fam == "exponential":
        x = -dist["theta"] * np.log1p(-u_arr)
    else:
        to_x, lower, upper, (lo_lim, hi_lim) = _tails(dist)
        x = np.empty_like(u_arr)
        low = u_arr <= 0.5
        if low.any():
            x[low] = to_x(_solve(lower, np.log(u_arr[low]), lo_lim, hi_lim, 1.0))
        if (~low).any():
            x[~low] = to_x(_solve(upper, np.log1p(-u_arr[~low]), lo_lim, hi_lim, -1.0))
    if np.ndim(u) == 0:
        return float(x[0])
    return x.reshape(np.shape(u))


# ---------------------------------------------------------------------------
# samplers


@dataclass
class TripletSampler:
    env_model: EnvParamModel
    rng_seed: int | np.random.SeedSequence | None = 0
    cholesky_L: np.ndarray = field(init=False)

    def __post_init__(self):
        self.cholesky_L = cholesky(nearest_psd_correlation(self.env_model.correlation))
        self._rng = np.random.default_rng(self.rng_seed)

    def gaussian(self, n: int) -> np.ndarray:
        """Correlated standard-normal stage X = L Z, shape (n, 3)."""
        return self._rng.standard_normal((n, 3)) @ self.cholesky_L.T

    def transform(self, X) -> np.ndarray:
        """Map Gaussian-stage rows to (U, W, F) rows."""
        X = np.asarray(X, dtype=float)
        out = np.empty_like(X)
        for j, dist in enumerate(self.env_model.marginals):
            out[:, j] = inverse_cdf(dist, special.ndtr(X[:, j]))
        out[:, 0] = np.clip(out[:, 0], 0.0, U_MAX)
        out[:, 1] = np.maximum(out[:, 1], 0.0)
        out[:, 2] = np.clip(out[:, 2], 0.0, 1.0)
        return out

    def sample(self, n: int) -> np.ndarray:
        return self.transform(self.gaussian(n))

    def sample_triplet(self) -> LosModelParams:
        return LosModelParams(*map(float, self.sample(1)[0]))


@dataclass
class FixedSampler:
    """Always returns the same parameters (average-model and d1/d2 baselines)."""

    params: LosModelParams

    def __post_init__(self):
        if isinstance(self.params, D1D2Params):
            self.params = self.params.as_uwf()

    def sample(self, n: int) -> np.ndarray:
        return np.tile(np.array(self.params.as_tuple(), dtype=float), (n, 1))

    def sample_triplet(self) -> LosModelParams:
        return self.params


def sample_triplet(sampler) -> LosModelParams:
    return sampler.sample_triplet()


def write_triplets_csv(path, triplets) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["U", "W", "F"])
        for row in np.asarray(triplets, dtype=float):
            w.writerow([repr(float(v)) for v in row])


def read_triplets_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(r["U"]), float(r["W"]), float(r["F"])] for r in csv.DictReader(fh)]
    return np.array(rows, dtype=float).reshape(-1, 3)
