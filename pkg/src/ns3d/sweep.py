"""Model-size sweep utilities: least-squares power-law fits of loss vs parameters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigError


@dataclass
class PowerLawFit:
    exponent: float
    coefficient: float
    irreducible: float
    r_squared: float

    @property
    def no_scaling(self) -> bool:
        return abs(self.exponent) < 1e-3

    def predict(self, n: np.ndarray) -> np.ndarray:
        return self.coefficient * np.asarray(n, dtype=float) ** self.exponent + self.irreducible


def fit_power_law(
    params: np.ndarray, losses: np.ndarray, irreducible: float | None = 0.0
) -> PowerLawFit:
    """Fit loss = a * N^b (+ c) by least squares in log-log space.

    irreducible=0.0 fits the pure power law; None additionally grid-searches a
    constant offset c that maximizes log-log linearity.
    """
    params = np.asarray(params, dtype=float)
    losses = np.asarray(losses, dtype=float)
    if len(params) < 3:
        raise ConfigError("power-law fit needs at least 3 (params, loss) points")

    def _fit(c: float):
        y = losses - c
        if (y <= 0).any():
            return None
        lx, ly = np.log(params), np.log(y)
        b, log_a = np.polyfit(lx, ly, 1)
        resid = ly - (b * lx + log_a)
        ss_tot = ((ly - ly.mean()) ** 2).sum()
        r2 = 1.0 - resid @ resid / ss_tot if ss_tot > 0 else (1.0 if np.allclose(resid, 0) else 0.0)
        return PowerLawFit(float(b), float(np.exp(log_a)), float(c), float(r2))

    if irreducible is not None:
        fit = _fit(irreducible)
        if fit is None:
            raise ConfigError("losses must exceed the irreducible offset")
        return fit
    hi = losses.min() * (1.0 - 1e-9)
    best = None
    for c in np.linspace(0.0, hi, 256):
        fit = _fit(float(c))
        if fit is not None and (best is None or fit.r_squared > best.r_squared):
            best = fit
    if best is None:
        raise ConfigError("no valid irreducible offset found")
    span = hi / 255.0
    res = minimize_scalar(
        lambda c: -(_fit(float(c)) or PowerLawFit(0, 0, 0, -np.inf)).r_squared,
        bounds=(max(0.0, best.irreducible - span), min(hi, best.irreducible + span)),
        method="bounded",
    )
    refined = _fit(float(res.x))
    if refined is not None and refined.r_squared > best.r_squared:
        best = refined
    return best
