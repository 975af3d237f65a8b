"""Two-component univariate Gaussian mixture over per-example losses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _backend
from .errors import ContractViolation

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 100
    rel_tol: float = 1e-6
    var_floor_scale: float = 1e-6
    init: str = "percentile"

    def __post_init__(self):
        if self.max_iters < 1 or not self.rel_tol > 0 or not self.var_floor_scale > 0:
            raise ContractViolation("max_iters >= 1, rel_tol > 0 and var_floor_scale > 0 required")
        if self.init != "percentile":
            raise ContractViolation(f"unknown init policy {self.init!r}")


@dataclass(frozen=True)
class Gmm1D2:
    """Mixture with component 0 = clean (smaller mean) and 1 = noisy."""

    means: tuple[float, float]
    variances: tuple[float, float]
    weights: tuple[float, float]
    degenerate: bool = False
    log_likelihoods: tuple[float, ...] = field(default=(), compare=False, repr=False)

    @property
    def clean_mean(self) -> float:
        return self.means[0]

    @property
    def noisy_mean(self) -> float:
        return self.means[1]

    @property
    def n_iter(self) -> int:
        return max(len(self.log_likelihoods) - 1, 0)

    def posteriors(self, losses, component: int = 0) -> np.ndarray:
        """Posterior of ``component`` (0 = clean) for every loss."""
        x = np.asarray(losses, dtype=np.float64)
        mu = np.asarray(self.means)
        var = np.asarray(self.variances)
        with np.errstate(divide="ignore"):
            logw = np.log(np.asarray(self.weights))
        logp = (logw - 0.5 * (_LOG_2PI + np.log(var))) - (x[..., None] - mu) ** 2 / (2.0 * var)
        m = logp.max(axis=-1, keepdims=True)
        e = np.exp(logp - m)
        return e[..., component] / e.sum(axis=-1)


def clean_posterior(gmm: Gmm1D2, loss: float) -> float:
    """``w_clean N(loss) / sum_k w_k N_k(loss)``, evaluated from shifted log-densities."""
    if not math.isfinite(loss):
        raise ContractViolation("loss must be finite")
    return float(gmm.posteriors(np.array([loss]))[0])


def fit_em(losses, cfg: EmConfig = EmConfig()) -> Gmm1D2:
    """Fit the mixture by EM from a percentile initialisation.

    Component means start at the 10th and 90th percentiles, both variances at
    the sample variance and weights at 1/2.  Variances are floored at
    ``var_floor_scale * (sample variance + 1e-12)``.  Input order does not
    matter: values are sorted before fitting.  Iterations run on losses
    divided by their standard deviation, which makes the fit covariant under
    rescaling; the reported log-likelihoods are in the original units.  When every loss lies within
    1e-9 of the others, a degenerate mixture (both components at the sample
    mean) is returned and flagged.
    """
    x = np.sort(np.asarray(losses, dtype=np.float64).ravel())
    if x.shape[0] < 2:
        raise ContractViolation("fit_em needs at least two loss values")
    if not np.isfinite(x).all():
        raise ContractViolation("losses must be finite")
    mean = float(x.mean())
    var = float(x.var())
    floor = cfg.var_floor_scale * (var + 1e-12)
    if x[-1] - x[0] <= 1e-9:
        v = max(var, floor)
        return Gmm1D2((mean, mean), (v, v), (0.5, 0.5), degenerate=True)
    # EM runs on standardised losses so the relative stopping rule does not depend on units
    s = math.sqrt(var)
    z = x / s
    mu0 = np.percentile(z, [10.0, 90.0])
    mu, var_k, w, history = _backend.kernels.em_fit(
        z, mu0, [max(1.0, floor / var)] * 2, [0.5, 0.5], cfg.max_iters, cfg.rel_tol, floor / var)
    mu = np.asarray(mu) * s
    var_k = np.maximum(np.asarray(var_k) * var, floor)
    history = np.asarray(history) - x.shape[0] * math.log(s)
    order = (0, 1) if mu[0] <= mu[1] else (1, 0)
    return Gmm1D2(
        tuple(float(mu[i]) for i in order),
        tuple(float(var_k[i]) for i in order),
        tuple(float(w[i]) for i in order),
        degenerate=False,
        log_likelihoods=tuple(float(h) for h in history),
    )
