"""Published reference values: per-environment average models, marginals and correlations."""
from __future__ import annotations

from .distfit import EnvParamModel, ParamDistribution, correlation_matrix
from .envclass import EnvClass
from .model import D1D2Params, LosModelParams

E = EnvClass

AVERAGE_MODELS = {
    E.METMA: LosModelParams(22.1, 339.5, 0.6756),
    E.UMA: LosModelParams(21.9, 607.4, 0.6929),
    E.SMA: LosModelParams(33.0, 400.0, 0.85),
    E.RMA: LosModelParams(9.9, 1209.6, 0.9031),
}

# d1/d2 form refitted to each environment's pooled curve
D1D2_FITS = {
    E.METMA: D1D2Params(2.0, 240.6),
    E.UMA: D1D2Params(10.0, 396.2),
    E.SMA: D1D2Params(10.2, 368.2),
    E.RMA: D1D2Params(10.0, 1169.2),
}

UMA_3GPP = D1D2Params(18.0, 63.0)

_G = lambda k, theta: ParamDistribution("gamma", {"k": k, "theta": theta})
_B = lambda a, b: ParamDistribution("beta", {"alpha": a, "beta": b})

MARGINALS = {
    E.METMA: (_G(0.1124, 752.3), _G(0.4223, 2242.9), _B(0.5276, 0.1691)),
    E.UMA: (_G(0.2352, 531.29), _G(0.7759, 849.43), _B(0.4266, 0.1204)),
    E.SMA: (_G(0.2039, 501.42), _G(0.7556, 687.66), _B(0.3962, 0.1035)),
    E.RMA: (_G(0.2932, 1126.0), _G(0.4679, 2937.0), _B(0.4124, 0.1951)),
}

# (rho_UW, rho_UF, rho_WF)
CORRELATIONS = {
    E.RMA: (0.0039, -0.3094, 0.0046),
    E.SMA: (-0.0079, -0.2147, -0.174),
    E.UMA: (-0.0362, -0.1615, -0.1164),
    E.METMA: (0.069, -0.4423, -0.3306),
}


def env_model(env) -> EnvParamModel:
    """Reference ensemble model of one environment."""
    env = EnvClass.parse(getattr(env, "value", env))
    U, W, F = MARGINALS[env]
    return EnvParamModel(env, U, W, F, correlation_matrix(*CORRELATIONS[env]))
