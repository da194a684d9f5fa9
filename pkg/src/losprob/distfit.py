"""Maximum-likelihood fits of candidate marginals and AICc family selection.

Parameterisations:

* gamma(k, theta): density x^(k-1) exp(-x/theta) / (Gamma(k) theta^k)
* exponential(theta): density exp(-x/theta) / theta
* gev(k, sigma, mu): CDF exp(-(1 + k z)^(-1/k)), z = (x - mu) / sigma;
  k > 0 has a heavy upper tail (note scipy's ``genextreme`` uses c = -k)
* beta(alpha, beta) on [0, 1]
* uniform on [0, 1], no free parameters
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .envclass import EnvClass

log = logging.getLogger(__name__)

N_PARAMS = {"gamma": 2, "exponential": 1, "gev": 3, "beta": 2, "uniform": 0}
PARAM_NAMES = {"gamma": ("k", "theta"), "exponential": ("theta",), "gev": ("k", "sigma", "mu"),
               "beta": ("alpha", "beta"), "uniform": ()}
SIZE_FAMILIES = ("gamma", "exponential", "gev")
FRACTION_FAMILIES = ("beta", "uniform")
DELTA_BAND = 7.0
BETA_CLIP = 1e-4
SIZE_FLOOR = 1e-2
MIN_SAMPLES = 10


class DistFitError(ValueError):
    """A maximum-likelihood fit could not be carried out."""


@dataclass(frozen=True)
class ParamDistribution:
    family: str
    params: dict = field(default_factory=dict)
    loglik: float = float("nan")
    aicc: float = float("nan")
    delta_aicc: float = float("nan")
    alternatives: tuple = ()

    def __post_init__(self):
        if self.family not in N_PARAMS:
            raise ValueError(f"unknown family {self.family!r}")
        names = PARAM_NAMES[self.family]
        if set(self.params) != set(names):
            raise ValueError(f"{self.family} needs parameters {names}, got {sorted(self.params)}")
        object.__setattr__(self, "params", {k: float(self.params[k]) for k in names})
        for name in ("k", "theta", "sigma", "alpha", "beta"):
            if name in self.params and not (name == "k" and self.family == "gev"):
                if not self.params[name] > 0:
                    raise ValueError(f"{self.family}: {name} must be > 0")

    @property
    def n_params(self) -> int:
        return N_PARAMS[self.family]

    def __getitem__(self, name):
        return self.params[name]

    def logpdf(self, x):
        return logpdf(self.family, self.params, x)

    def cdf(self, x):
        return cdf(self.family, self.params, x)

    def sf(self, x):
        return sf(self.family, self.params, x)

    def to_dict(self) -> dict:
        d = {"family": self.family, "params": dict(self.params), "loglik": self.loglik,
             "aicc": self.aicc, "delta_aicc": self.delta_aicc}
        if self.alternatives:
            d["candidates"] = [a.to_dict() for a in self.alternatives]
        return d

    @classmethod
    def from_dict(cls, d) -> "ParamDistribution":
        alts = tuple(cls.from_dict(a) for a in d.get("candidates", ()))
        return cls(d["family"], d["params"], d.get("loglik", float("nan")),
                   d.get("aicc", float("nan")), d.get("delta_aicc", float("nan")), alts)


# ---------------------------------------------------------------------------
# densities and distribution functions


def _gev_t(params, x):
    k, s, mu = params["k"], params["sigma"], params["mu"]
    return 1.0 + k * (np.asarray(x, float) - mu) / s


def logpdf(family, params, x):
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if family == "gamma":
            k, th = params["k"], params["theta"]
            out = (k - 1) * np.log(x) - x / th - special.gammaln(k) - k * math.log(th)
            return np.where(x > 0, out, -np.inf)
        if family == "exponential":
            th = params["theta"]
            return np.where(x >= 0, -x / th - math.log(th), -np.inf)
        if family == "gev":
            k, s, mu = params["k"], params["sigma"], params["mu"]
            if abs(k) < 1e-12:
                z = (x - mu) / s
                return -math.log(s) - z - np.exp(-z)
            t = _gev_t(params, x)
            lt = np.log(t)
            out = -math.log(s) - np.exp(-lt / k) - (1.0 + 1.0 / k) * lt
            return np.where(t > 0, out, -np.inf)
        if family == "beta":
            a, b = params["alpha"], params["beta"]
            out = special.xlogy(a - 1, x) + special.xlog1py(b - 1, -x) - special.betaln(a, b)
            return np.where((x > 0) & (x < 1), out, -np.inf)
        if family == "uniform":
            return np.where((x >= 0) & (x <= 1), 0.0, -np.inf)
    raise ValueError(f"unknown family {family!r}")


def cdf(family, params, x):
    x = np.asarray(x, float)
    if family == "gamma":
        return special.gammainc(params["k"], np.maximum(x, 0) / params["theta"])
    if family == "exponential":
        return -np.expm1(-np.maximum(x, 0) / params["theta"])
    if family == "gev":
        return np.exp(-_gev_tail(params, x))
    if family == "beta":
        return special.betainc(params["alpha"], params["beta"], np.clip(x, 0, 1))
    if family == "uniform":
        return np.clip(x, 0.0, 1.0)
    raise ValueError(f"unknown family {family!r}")


def sf(family, params, x):
    """Survival function 1 - CDF, accurate in the upper tail."""
    x = np.asarray(x, float)
    if family == "gamma":
        return special.gammaincc(params["k"], np.maximum(x, 0) / params["theta"])
    if family == "exponential":
        return np.exp(-np.maximum(x, 0) / params["theta"])
    if family == "gev":
        return -np.expm1(-_gev_tail(params, x))
    if family == "beta":
        return special.betainc(params["beta"], params["alpha"], np.clip(1 - x, 0, 1))
    if family == "uniform":
        return 1.0 - np.clip(x, 0.0, 1.0)
    raise ValueError(f"unknown family {family!r}")


def _gev_tail(params, x):
    """(1 + k z)^(-1/k), the quantity inside exp(-.) of the GEV CDF."""
    k, s, mu = params["k"], params["sigma"], params["mu"]
    if abs(k) < 1e-12:
        return np.exp(-(x - mu) / s)
    t = _gev_t(params, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(t > 0, np.exp(-np.log(np.where(t > 0, t, 1.0)) / k), 0.0)
    # outside the support: below a lower bound (k > 0) the CDF is 0, above an upper one it is 1
    return np.where(t > 0, out, np.inf if k > 0 else 0.0)


# ---------------------------------------------------------------------------
# maximum likelihood


def _check_support(x, family):
    if family in ("gamma", "exponential"):
        bad = ~(x > 0)
        what = "x > 0"
    elif family == "beta":
        bad = ~((x > 0) & (x < 1))
        what = "0 < x < 1"
    elif family == "uniform":
        bad = ~((x >= 0) & (x <= 1))
        what = "0 <= x <= 1"
    else:
        bad = ~np.isfinite(x)
        what = "finite x"
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DistFitError(f"{family}: sample {i} = {x[i]!r} violates support {what}")


def _fit_gamma(x):
    m = x.mean()
    s = math.log(m) - np.log(x).mean()
    if not s > 1e-14:
        raise DistFitError("gamma: samples have (near) zero spread")
    # profile score in k: log k - digamma(k) = log(mean) - mean(log x)
    score = lambda lk: math.log(math.exp(lk)) - special.digamma(math.exp(lk)) - s
    lo, hi = -5.0, 5.0
    while score(lo) < 0:
        lo -= 5.0
        if lo < -60:
            raise DistFitError("gamma: shape bracket search failed")
    while score(hi) > 0:
        hi += 5.0
        if hi > 60:
            raise DistFitError("gamma: shape bracket search failed")
    k = math.exp(optimize.brentq(score, lo, hi, xtol=1e-14, rtol=1e-14))
    return {"k": k, "theta": m / k}


def _censored(x):
    """Masks of values at or beyond the lower and upper clip bounds."""
    return x <= BETA_CLIP, x >= 1 - BETA_CLIP


def _beta_censored_ll(a, b, n_lo, n_hi):
    out = 0.0
    if n_lo:
        out += n_lo * math.log(max(special.betainc(a, b, BETA_CLIP), 1e-300))
    if n_hi:
        out += n_hi * math.log(max(special.betainc(b, a, BETA_CLIP), 1e-300))
    return out


def _fit_beta(x):
    m, v = x.mean(), x.var()
    if not v > 1e-14:
        raise DistFitError("beta: samples have (near) zero spread, fit is degenerate")
    common = max(m * (1 - m) / v - 1.0, 1e-3)
    seed = np.log([m * common, (1 - m) * common])
    lo, hi = _censored(x)
    n_lo, n_hi = int(lo.sum()), int(hi.sum())
    xm = x[~(lo | hi)]
    n = len(xm)
    sl, sl1 = np.log(xm).sum(), np.log1p(-xm).sum()
    h = 1e-6

    def nll(p):
        a, b = np.exp(p)
        ll = (a - 1) * sl + (b - 1) * sl1 - n * special.betaln(a, b)
        dig = special.digamma(a + b)
        ga = a * (sl - n * (special.digamma(a) - dig))
        gb = b * (sl1 - n * (special.digamma(b) - dig))
        if n_lo or n_hi:
            ll += _beta_censored_ll(a, b, n_lo, n_hi)
            # the censored terms have no closed-form derivative; central differences in log space
            ga += (_beta_censored_ll(a * math.exp(h), b, n_lo, n_hi)
                   - _beta_censored_ll(a * math.exp(-h), b, n_lo, n_hi)) / (2 * h)
            gb += (_beta_censored_ll(a, b * math.exp(h), n_lo, n_hi)
                   - _beta_censored_ll(a, b * math.exp(-h), n_lo, n_hi)) / (2 * h)
        return -ll, -np.array([ga, gb])

    res = optimize.minimize(nll, seed, jac=True, method="L-BFGS-B",
                            bounds=[(-12, 12), (-12, 12)], options={"ftol": 1e-15, "gtol": 1e-10})
    a, b = np.exp(res.x)
    if not (res.success or np.abs(res.jac).max() < 1e-4 * len(x)) or max(abs(res.x)) >= 12:
        raise DistFitError(f"beta: optimiser did not converge ({res.message}); "
                           f"last estimate alpha={a:g}, beta={b:g}")
    return {"alpha": float(a), "beta": float(b)}


def loglik(family, params, x) -> float:
    """Log-likelihood of ``x``; for the [0, 1] families, values within
    BETA_CLIP of an end point count as censored (probability of the end
    interval rather than density)."""
    x = np.asarray(x, dtype=float)
    if family not in FRACTION_FAMILIES:
        return float(np.sum(logpdf(family, params, x)))
    lo, hi = _censored(x)
    mid = float(np.sum(logpdf(family, params, x[~(lo | hi)])))
    if family == "uniform":
        return mid + (lo.sum() + hi.sum()) * math.log(BETA_CLIP)
    return mid + _beta_censored_ll(params["alpha"], params["beta"], int(lo.sum()), int(hi.sum()))


def gev_pwm(x):
    """Probability-weighted-moment estimates of (k, sigma, mu)."""
    xs = np.sort(x)
    n = len(xs)
    j = np.arange(n)
    b0 = xs.mean()
    b1 = np.sum(j / (n - 1) * xs) / n
    b2 = np.sum(j * (j - 1) / ((n - 1) * (n - 2)) * xs) / n
    c = (2 * b1 - b0) / (3 * b2 - b0) - math.log(2) / math.log(3)
    kh = 7.8590 * c + 2.9554 * c * c  # shape with the opposite sign convention
    if abs(kh) < 1e-6:
        sigma = (2 * b1 - b0) / math.log(2)
        mu = b0 - 0.5772156649015329 * sigma
        return {"k": 0.0, "sigma": sigma, "mu": mu}
    g = math.gamma(1 + kh)
    sigma = (2 * b1 - b0) * kh / (g * (1 - 2 ** (-kh)))
    mu = b0 + sigma * (g - 1) / kh
    return {"k": -kh, "sigma": sigma, "mu": mu}


def _gev_nll_grad(p, x, scale):
    """Negative log-likelihood and gradient in (k, log sigma, mu / scale)."""
    k, ls, mu = p[0], p[1], p[2] * scale
    sig = math.exp(ls) * scale
    z = (x - mu) / sig
    if abs(k) < 1e-6:
        e = np.exp(-z)
        ll = -ls - math.log(scale) - z - e
        A = 1.0 - e  # -d ll / d z
        g = np.array([float(np.sum(0.5 * z * z * A - z)), float(np.sum(-1.0 + A * z)),
                      float(np.sum(A)) / sig * scale])
        return -float(ll.sum()), -g
    t = 1.0 + k * z
    if not np.all(t > 0):
        return math.inf, np.zeros(3)
    lt = np.log1p(k * z)
    tau = np.exp(-lt / k)
    ll = -math.log(sig) - tau - (1.0 + 1.0 / k) * lt
    A = (tau / k - (1.0 + 1.0 / k)) / t  # d ll / d t
    gk = np.sum(A * z + lt / k ** 2 * (1.0 - tau))
    gls = np.sum(-1.0 - A * k * z)
    gmu = np.sum(-A * k / sig) * scale
    return -float(ll.sum()), -np.array([gk, gls, gmu])


def _bfgs_backtrack(fg, x0, max_iter=500, gtol=1e-8):
    """BFGS with step halving; an infinite objective (outside the support) just
    shortens the step, which a standard Wolfe line search does not tolerate.
    Returns (x, f, converged)."""
    x = np.asarray(x0, dtype=float)
    f, g = fg(x)
    H = np.eye(len(x))
    for _ in range(max_iter):
        if np.abs(g).max() <= gtol * max(1.0, abs(f)):
            return x, f, True
        d = -H @ g
        if d @ g >= 0:  # lost descent: restart from steepest descent
            H = np.eye(len(x))
            d = -g
        step = min(1.0, 1.0 / max(np.abs(d).max(), 1e-300))
        while step > 1e-14:
            xn = x + step * d
            fn, gn = fg(xn)
            if fn <= f + 1e-4 * step * (d @ g):
                break
            step *= 0.5
        else:
            return x, f, True  # no decrease along a descent direction: a (numerical) optimum
        s_, y = xn - x, gn - g
        sy = s_ @ y
        if sy > 1e-12:
            rho = 1.0 / sy
            V = np.eye(len(x)) - rho * np.outer(s_, y)
            H = V @ H @ V.T + rho * np.outer(s_, s_)
        converged = abs(f - fn) <= 1e-15 * max(1.0, abs(f))
        x, f, g = xn, fn, gn
        if converged:
            return x, f, True
    return x, f, False


def _fit_gev(x):
    seed = gev_pwm(x)
    if not (np.isfinite(list(seed.values())).all() and seed["sigma"] > 0):
        seed = {"k": 0.1, "sigma": float(x.std()) or 1.0, "mu": float(np.median(x))}
    scale = max(seed["sigma"], 1e-12)
    nll = lambda p: _gev_nll_grad(p, x, scale)[0]

    # start at a point with finite likelihood: shrink k toward 0 if needed
    p0 = np.array([seed["k"], math.log(seed["sigma"] / scale), seed["mu"] / scale])
    for _ in range(30):
        if nll(p0) < math.inf:
            break
        p0[0] *= 0.5
        p0[1] += 0.5
    else:
        raise DistFitError("gev: no feasible starting point")
    # quasi-Newton on the analytic gradient, then a simplex polish around k = 0
    # where the gradient is crude. On very skewed samples the likelihood keeps
    # rising along a ridge toward large k; that is reported as non-convergence.
    x_opt, f_opt, ok = _bfgs_backtrack(lambda p: _gev_nll_grad(p, x, scale), p0)
    best = optimize.minimize(nll, x_opt, method="Nelder-Mead",
                             options={"xatol": 1e-10, "fatol": 1e-10, "maxfev": 2000})
    if best.fun > f_opt:
        best.x, best.fun = x_opt, f_opt
    if not ok and best.status != 0:
        raise DistFitError(f"gev: no convergence (k={best.x[0]:.3g}, nll={best.fun:.6g} still "
                           f"decreasing after the iteration budget)")
    k = float(best.x[0])
    if not math.isfinite(best.fun):
        raise DistFitError(f"gev: optimiser failed ({best.message})")
    if k <= -1.0:
        raise DistFitError(f"gev: shape k={k:.3f} <= -1, maximum likelihood does not exist")
    return {"k": k, "sigma": float(math.exp(best.x[1]) * scale), "mu": float(best.x[2] * scale)}


def ml_fit(samples, family) -> tuple[dict, float]:
    """Maximum-likelihood parameters and the attained log-likelihood."""
    x = np.asarray(samples, dtype=float)
    if len(x) < MIN_SAMPLES:
        raise DistFitError(f"{family}: need at least {MIN_SAMPLES} samples, got {len(x)}")
    _check_support(x, family)
    if family == "exponential":
        params = {"theta": float(x.mean())}
    elif family == "gamma":
        params = _fit_gamma(x)
    elif family == "beta":
        params = _fit_beta(x)
    elif family == "gev":
        params = _fit_gev(x)
    elif family == "uniform":
        params = {}
    else:
        raise ValueError(f"unknown family {family!r}")
    return params, loglik(family, params, x)


def aicc(loglik: float, k_params: int, n_samples: int) -> float:
    if n_samples <= k_params + 1:
        raise ValueError(f"AICc needs n > k + 1 (n={n_samples}, k={k_params})")
    aic = 2 * k_params - 2 * loglik
    return aic + (2 * k_params ** 2 + 2 * k_params) / (n_samples - k_params - 1)


def choose(fitted) -> ParamDistribution:
    """Apply the ΔAICc rule to already fitted candidates.

    Within the band 0 <= ΔAICc <= 7 the family with the fewest parameters
    wins; equal complexity falls back to the lower AICc.
    """
    fitted = list(fitted)
    if not fitted:
        raise DistFitError("no candidate distribution could be fitted")
    best = min(d.aicc for d in fitted)
    scored = [ParamDistribution(d.family, d.params, d.loglik, d.aicc, d.aicc - best) for d in fitted]
    band = [d for d in scored if d.delta_aicc <= DELTA_BAND]
    pick = min(band, key=lambda d: (d.n_params, d.aicc))
    return ParamDistribution(pick.family, pick.params, pick.loglik, pick.aicc, pick.delta_aicc,
                             tuple(scored))


def select_family(samples, candidates=SIZE_FAMILIES) -> ParamDistribution:
    x = np.asarray(samples, dtype=float)
    fitted = []
    for fam in candidates:
        try:
            params, ll = ml_fit(x, fam)
        except DistFitError as exc:
            log.warning("dropping candidate %s: %s", fam, exc)
            continue
        fitted.append(ParamDistribution(fam, params, ll, aicc(ll, N_PARAMS[fam], len(x))))
    if not fitted:
        raise DistFitError(f"every candidate in {tuple(candidates)} failed")
    return choose(fitted)


# ---------------------------------------------------------------------------
# environment models


def nearest_psd_correlation(R) -> np.ndarray:
    """Clip negative eigenvalues to 0 and rescale back to a unit diagonal."""
    R = 0.5 * (np.asarray(R, float) + np.asarray(R, float).T)
    vals, vecs = np.linalg.eigh(R)
    if vals.min() >= 0:
        return R
    A = (vecs * np.clip(vals, 0, None)) @ vecs.T
    d = np.sqrt(np.diag(A))
    A = A / np.outer(d, d)
    np.fill_diagonal(A, 1.0)
    return A


def correlation_matrix(rho_uw, rho_uf, rho_wf) -> np.ndarray:
    return np.array([[1.0, rho_uw, rho_uf], [rho_uw, 1.0, rho_wf], [rho_uf, rho_wf, 1.0]])


@dataclass(frozen=True)
class EnvParamModel:
    env: EnvClass
    dist_U: ParamDistribution
    dist_W: ParamDistribution
    dist_F: ParamDistribution
    correlation: np.ndarray
    n_cells: int = 0

    def __post_init__(self):
        R = np.array(self.correlation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R, R.T) or not np.allclose(np.diag(R), 1.0):
            raise ValueError("correlation must be a symmetric 3x3 matrix with unit diagonal")
        R.setflags(write=False)
        object.__setattr__(self, "correlation", R)
        object.__setattr__(self, "env", EnvClass.parse(getattr(self.env, "value", self.env)))

    @property
    def marginals(self):
        return (self.dist_U, self.dist_W, self.dist_F)

    def to_dict(self) -> dict:
        return {"env": self.env.value, "n_cells": self.n_cells, "U": self.dist_U.to_dict(),
                "W": self.dist_W.to_dict(), "F": self.dist_F.to_dict(),
                "correlation": self.correlation.tolist()}

    @classmethod
    def from_dict(cls, d) -> "EnvParamModel":
        return cls(EnvClass.parse(d["env"]), ParamDistribution.from_dict(d["U"]),
                   ParamDistribution.from_dict(d["W"]), ParamDistribution.from_dict(d["F"]),
                   np.array(d["correlation"]), int(d.get("n_cells", 0)))


def fit_environment(fits, env) -> EnvParamModel:
    """Marginals and pairwise correlations of (U, W, F) over one environment's cells.

    ``fits`` are FitResult objects with outliers already removed.
    """
    fits = list(fits)
    if len(fits) < MIN_SAMPLES:
        raise DistFitError(f"{env}: need at least {MIN_SAMPLES} cells, got {len(fits)}")
    P = np.array([f.params.as_tuple() for f in fits], dtype=float)
    U, W, F = P.T
    dist_U = select_family(np.maximum(U, SIZE_FLOOR), SIZE_FAMILIES)
    dist_W = select_family(np.maximum(W, SIZE_FLOOR), SIZE_FAMILIES)
    fitted = []
    try:
        params, ll = ml_fit(np.clip(F, BETA_CLIP, 1 - BETA_CLIP), "beta")
        fitted.append(ParamDistribution("beta", params, ll, aicc(ll, 2, len(F))))
    except DistFitError as exc:
        log.warning("%s: beta fit for F failed (%s); falling back to uniform", env, exc)
    ll = loglik("uniform", {}, np.clip(F, 0.0, 1.0))
    fitted.append(ParamDistribution("uniform", {}, ll, aicc(ll, 0, len(F))))
    dist_F = choose(fitted)
    R = np.eye(3)
    for (i, j) in ((0, 1), (0, 2), (1, 2)):
        a, b = P[:, i], P[:, j]
        if a.std() == 0 or b.std() == 0:
            log.warning("%s: constant parameter column, correlation set to 0", env)
            continue
        R[i, j] = R[j, i] = float(np.corrcoef(a, b)[0, 1])
    R = nearest_psd_correlation(R)
    return EnvParamModel(env, dist_U, dist_W, dist_F, R, len(fits))


def write_env_models(path, models) -> None:
    doc = {"environments": {m.env.value: m.to_dict() for m in models}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_env_models(path) -> dict[EnvClass, EnvParamModel]:
    with open(path) as fh:
        doc = json.load(fh)
    return {EnvClass.parse(k): EnvParamModel.from_dict(v) for k, v in doc["environments"].items()}
