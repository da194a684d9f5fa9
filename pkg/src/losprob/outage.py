"""Two-BS Monte Carlo SIR outage simulation.

A UE sits on the line between two base stations 1 km apart, d_bs1 from the
serving one. Each link is independently LOS with probability p_los of its
cell's (U, W, F) parameters, gets a UMa pathloss for that state plus
log-normal shadowing, and the realization is an outage when the SIR falls
below the threshold.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import presets
from .envclass import EnvClass
from .model import p_los_array
from .sampling import FixedSampler, TripletSampler

C_LIGHT = 299_792_458.0
MODELS = ("ensemble", "average", "3gpp")


@dataclass(frozen=True)
class SimConfig:
    frequency: float = 740e6
    bs_height: float = 25.0
    ue_height: float = 0.0
    cell_radius: float = 500.0
    sir_threshold: float = 0.399
    d_bs1_values: tuple = (100.0, 200.0, 300.0, 400.0, 500.0)
    n_param_pairs: int = 1000
    n_los_realizations: int = 1000
    sigma_los: float = 4.0
    sigma_nlos: float = 6.0
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "d_bs1_values", tuple(float(d) for d in self.d_bs1_values))
        if self.sigma_los < 0 or self.sigma_nlos < 0:
            raise ValueError("shadowing sigmas must be non-negative")
        if math.isnan(self.sir_threshold):
            raise ValueError("sir_threshold must not be NaN")
        if self.n_param_pairs < 1 or self.n_los_realizations < 1:
            raise ValueError("need at least one parameter pair and one realization")
        for d in self.d_bs1_values:
            if not 0 < d < self.inter_site_distance:
                raise ValueError(f"d_bs1 = {d} outside (0, {self.inter_site_distance})")

    @property
    def inter_site_distance(self) -> float:
        return 2.0 * self.cell_radius

    @property
    def ue_effective_height(self) -> float:
        return max(self.ue_height, 1.5)

    @property
    def breakpoint(self) -> float:
        """d'_BP with 1 m effective environment height."""
        return 4 * (self.bs_height - 1.0) * (self.ue_effective_height - 1.0) * self.frequency / C_LIGHT


def pathloss_db(d_2d, is_los, config: SimConfig = SimConfig()):
    """UMa pathloss in dB; LOS has the two-slope form around the breakpoint."""
    d = np.asarray(d_2d, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("d_2d must be > 0")
    h_ue = config.ue_effective_height
    dh = config.bs_height - h_ue
    d3 = np.sqrt(d * d + dh * dh)
    fg = 20.0 * math.log10(config.frequency / 1e9)
    dbp = config.breakpoint
    pl1 = 28.0 + 22.0 * np.log10(d3) + fg
    pl2 = 28.0 + 40.0 * np.log10(d3) + fg - 9.0 * math.log10(dbp * dbp + dh * dh)
    los = np.where(d <= dbp, pl1, pl2)
    nlos = np.maximum(los, 13.54 + 39.08 * np.log10(d3) + fg - 0.6 * (h_ue - 1.5))
    out = np.where(np.asarray(is_los, dtype=bool), los, nlos)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class OutageResult:
    model_tag: str
    d_bs1: float
    outage_values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.outage_values, dtype=float)
        if np.any((v < 0) | (v > 1)):
            raise ValueError("outage values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "outage_values", v)

    @property
    def mean_outage(self) -> float:
        return float(self.outage_values.mean())

    @property
    def variance(self) -> float:
        return float(self.outage_values.var())


def _pair_outage(pa, pb, d1, d2, config, rng):
    n_pairs, n_real = len(pa), config.n_los_realizations
    pl1 = (pathloss_db(d1, False, config), pathloss_db(d1, True, config))
    pl2 = (pathloss_db(d2, False, config), pathloss_db(d2, True, config))
    p1 = p_los_array(pa[:, 0], pa[:, 1], pa[:, 2], d1)
    p2 = p_los_array(pb[:, 0], pb[:, 1], pb[:, 2], d2)
    out = np.empty(n_pairs)
    chunk = max(1, 2_000_000 // n_real)
    for s in range(0, n_pairs, chunk):
        sl = slice(s, min(s + chunk, n_pairs))
        m = sl.stop - sl.start
        los1 = rng.random((m, n_real)) < p1[sl, None]
        los2 = rng.random((m, n_real)) < p2[sl, None]
        z = rng.standard_normal((2, m, n_real))
        s1 = z[0] * np.where(los1, config.sigma_los, config.sigma_nlos)
        s2 = z[1] * np.where(los2, config.sigma_los, config.sigma_nlos)
        sir = (-np.where(los1, pl1[1], pl1[0]) + s1) - (-np.where(los2, pl2[1], pl2[0]) + s2)
        out[sl] = (sir < config.sir_threshold).mean(axis=1)
    return out


def simulate(sampler_a, sampler_b, config: SimConfig = SimConfig(), model_tag: str = "") -> list:
    """Outage per parameter pair at every d_bs1 of ``config``.

    Parameter pairs are drawn once and shared by all distances; LOS and
    shadowing draws use one independent substream per distance.
    """
    pa = np.asarray(sampler_a.sample(config.n_param_pairs), dtype=float)
    pb = np.asarray(sampler_b.sample(config.n_param_pairs), dtype=float)
    streams = np.random.SeedSequence(config.rng_seed).spawn(len(config.d_bs1_values))
    results = []
    for d1, ss in zip(config.d_bs1_values, streams):
        rng = np.random.default_rng(ss)
        d2 = config.inter_site_distance - d1
        results.append(OutageResult(model_tag, d1, _pair_outage(pa, pb, d1, d2, config, rng)))
    return results


def make_sampler(model: str, env, seed=0, env_model=None):
    """Sampler for one BS: ensemble draws, the average triplet, or the 3GPP UMa d1/d2."""
    env = EnvClass.parse(getattr(env, "value", env))
    if model == "ensemble":
        return TripletSampler(env_model or presets.env_model(env), seed)
    if model == "average":
        return FixedSampler(presets.AVERAGE_MODELS[env])
    if model == "3gpp":
        return FixedSampler(presets.UMA_3GPP)
    raise ValueError(f"unknown model {model!r}; expected one of {MODELS}")


def run_model(model: str, env, config: SimConfig = SimConfig(), env_model=None) -> list:
    ss_a, ss_b = np.random.SeedSequence([config.rng_seed, 1]).spawn(2)
    return simulate(make_sampler(model, env, ss_a, env_model), make_sampler(model, env, ss_b, env_model),
                    config, model)


def outage_cdf(result: OutageResult):
    """Sorted outage values and their cumulative fractions i/n."""
    v = np.sort(result.outage_values)
    if v.size == 0:
        raise ValueError("no outage values")
    return v, np.arange(1, v.size + 1) / v.size


def write_outage_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "d_bs1", "pair", "outage"])
        for r in results:
            for i, v in enumerate(r.outage_values):
                w.writerow([r.model_tag, repr(r.d_bs1), i, repr(float(v))])


def write_cdf_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "d_bs1", "outage", "cdf"])
        for r in results:
            for v, c in zip(*outage_cdf(r)):
                w.writerow([r.model_tag, repr(r.d_bs1), repr(float(v)), repr(float(c))])
