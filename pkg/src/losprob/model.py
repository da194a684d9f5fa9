"""The (U, W, F) LOS probability model and the d1/d2 baseline it generalises.

For r <= U the probability is 1. Beyond the cutoff U it is

    F * ((U / r) * (1 - exp(-r / W)) + exp(-r / W))

so F scales the decaying branch and ``1 - F`` is the size of the jump at U.
Setting F = 1, U = d1, W = d2 gives the d1/d2 form exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

U_MAX = 1000.0


@dataclass(frozen=True)
class LosModelParams:
    U: float
    W: float
    F: float

    def __post_init__(self):
        if not (0.0 <= self.U <= U_MAX and self.W >= 0.0 and 0.0 <= self.F <= 1.0):
            raise ValueError(f"parameters outside the feasible box: {self}")

    def as_tuple(self):
        return (self.U, self.W, self.F)


@dataclass(frozen=True)
class D1D2Params:
    d1: float
    d2: float

    def __post_init__(self):
        if not (self.d1 >= 0.0 and self.d2 > 0.0):
            raise ValueError(f"invalid d1/d2 parameters: {self}")

    def as_uwf(self) -> LosModelParams:
        return LosModelParams(self.d1, self.d2, 1.0)


def _check_r(r):
    r = np.asarray(r, dtype=float)
    if np.any(~(r > 0)):
        raise ValueError("distance must be > 0")
    return r


def decay_branch(U, W, r):
    """``(U/r)(1 - e^{-r/W}) + e^{-r/W}``, with the W -> 0 limit ``U/r``.

    Broadcasts over all arguments; does not apply the r <= U case.
    """
    U, W, r = np.broadcast_arrays(np.asarray(U, float), np.asarray(W, float), np.asarray(r, float))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        e = np.where(W > 0, np.exp(-r / np.where(W > 0, W, 1.0)), 0.0)
    return (U / r) * (1.0 - e) + e


def p_los(params: LosModelParams, r):
    """LOS probability at 2D distance ``r`` (scalar or array, meters)."""
    r = _check_r(r)
    U, W, F = params.as_tuple()
    out = np.where(r <= U, 1.0, F * decay_branch(U, W, r))
    return float(out) if out.ndim == 0 else out


def p_los_array(U, W, F, r):
    """Vectorised p_los over arrays of parameters; no box validation."""
    U = np.asarray(U, float)
    return np.where(r <= U, 1.0, np.asarray(F, float) * decay_branch(U, W, r))


def p_los_3gpp(params: D1D2Params, r):
    r = _check_r(r)
    e = np.exp(-r / params.d2)
    out = np.minimum(params.d1 / r, 1.0) * (1.0 - e) + e
    return float(out) if out.ndim == 0 else out
