"""Forward-curve evolution models and their correlation functions.

Every model is an exact per-maturity martingale: lognormal steps multiply
by the exponential of a centered normal, normal steps add one.  Volatility
decays with time to maturity at the mean-reversion rate alpha; beta > 0
decorrelates maturities through per-maturity drivers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .curves import ForwardCurve

__all__ = ["PriceProcessSpec", "PathState", "make_path", "evolve", "correlation", "spot"]

_KINDS = ("lognormal-1f", "normal-1f", "lognormal-2f")


@dataclass
class PriceProcessSpec:
    """Stochastic model parameters.

    kinds:
      lognormal-1f  dF/F = sigma0 e^{-alpha (T-t)} dW
      normal-1f     dF   = kappa0 e^{-alpha (T-t)} dW   (swing spreads)
      lognormal-2f  dF/F = kappa10 e^{-alpha1 (T-t)} dW1
                          + kappa20 e^{-alpha2 (T-t)} dW2,  corr(W1,W2)=rho

    beta > 0 replaces the single driver with per-maturity drivers carrying
    correlation exp(-beta |T_i - T_j|) (one-factor kinds only).
    """

    kind: str = "lognormal-1f"
    sigma0: float = 0.0
    kappa0: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0
    kappa10: float = 0.0
    kappa20: float = 0.0
    alpha1: float = 0.0
    alpha2: float = 0.0
    rho: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"unknown process kind {self.kind!r}")
        for name in ("sigma0", "kappa0", "kappa10", "kappa20"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [-1, 1]")
        if self.kind == "lognormal-2f" and self.beta != 0.0:
            raise ValueError("beta decorrelation is defined for one-factor kinds")


@dataclass
class PathState:
    """One simulated path: the current curve plus its private RNG stream."""

    curve: ForwardCurve
    rng: np.random.Generator
    t: float = 0.0
    antithetic_sign: float = 1.0
    _chol: np.ndarray | None = field(default=None, repr=False)

    @property
    def deliveries(self) -> np.ndarray:
        return self.curve.deliveries

    @property
    def prices(self) -> np.ndarray:
        return self.curve.prices


def make_path(
    curve0: ForwardCurve, seed: int, path_index: int, antithetic: bool = False
) -> PathState:
    """Counter-based substream keyed by (seed, path index).

    With antithetic pairing, paths 2m and 2m+1 share substream m and
    opposite signs, so results do not depend on scheduling order either way.
    """
    if antithetic:
        sub, sign = divmod(path_index, 2)
        sign = 1.0 if sign == 0 else -1.0
    else:
        sub, sign = path_index, 1.0
    key = np.array([seed, sub], dtype=np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return PathState(curve0.copy(), rng, t=float(curve0.obs_time), antithetic_sign=sign)


def _driver_chol(state: PathState, beta: float) -> np.ndarray:
    if state._chol is None:
        T = state.deliveries
        cov = np.exp(-beta * np.abs(T[:, None] - T[None, :]))
        # tiny jitter keeps the factorization stable for dense grids
        cov[np.diag_indices_from(cov)] += 1e-12
        state._chol = np.linalg.cholesky(cov)
    return state._chol


def _draw(state: PathState, spec: PriceProcessSpec, alive: np.ndarray) -> np.ndarray:
    if spec.beta > 0.0:
        # draw for the full grid so substreams stay aligned, then restrict
        z = state.rng.standard_normal(state.deliveries.size)
        z = (_driver_chol(state, spec.beta) @ z)[alive]
    else:
        z = np.full(int(np.count_nonzero(alive)), float(state.rng.standard_normal()))
    return state.antithetic_sign * z


def evolve(state: PathState, spec: PriceProcessSpec, dt: float) -> PathState:
    """Advance the curve by dt; buckets delivering before t+dt stay frozen.

    The stepping is exact (exponential of a normal for lognormal kinds), so
    each retained maturity is a martingale at any step size.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    T = state.deliveries
    t = state.t
    alive = T >= t + dt - 1e-12
    tau = T[alive] - t
    n = int(np.count_nonzero(alive))
    if n:
        if spec.kind == "lognormal-1f":
            sig = spec.sigma0 * np.exp(-spec.alpha * tau)
            z = _draw(state, spec, alive)
            state.curve.prices[alive] *= np.exp(
                sig * math.sqrt(dt) * z - 0.5 * sig * sig * dt
            )
        elif spec.kind == "normal-1f":
            kap = spec.kappa0 * np.exp(-spec.alpha * tau)
            z = _draw(state, spec, alive)
            state.curve.prices[alive] += kap * math.sqrt(dt) * z
        else:  # lognormal-2f
            k1 = spec.kappa10 * np.exp(-spec.alpha1 * tau)
            k2 = spec.kappa20 * np.exp(-spec.alpha2 * tau)
            z1 = float(state.rng.standard_normal())
            zp = float(state.rng.standard_normal())
            z1 *= state.antithetic_sign
            zp *= state.antithetic_sign
            z2 = spec.rho * z1 + math.sqrt(max(0.0, 1.0 - spec.rho**2)) * zp
            var = k1 * k1 + k2 * k2 + 2.0 * spec.rho * k1 * k2
            state.curve.prices[alive] *= np.exp(
                (k1 * z1 + k2 * z2) * math.sqrt(dt) - 0.5 * var * dt
            )
    state.t = t + dt
    state.curve.obs_time = state.t
    return state


def spot(state: PathState) -> float:
    """Price of the prompt bucket s(t) = F(t, t), frozen at delivery."""
    T = state.deliveries
    i = int(np.searchsorted(T, state.t + 1e-12)) - 1
    i = min(max(i, 0), T.size - 1)
    return float(state.prices[i])


def correlation(
    spec: PriceProcessSpec,
    t: float,
    T1: float,
    T2: float,
    F1: float,
    F2: float,
) -> float:
    """Instantaneous covariance density of dF(T1) dF(T2) / dt.

    Uses the small-volatility form where the price-level correlation
    <F F> is replaced by the product of current prices.
    """
    tau1, tau2 = T1 - t, T2 - t
    if tau1 < -1e-12 or tau2 < -1e-12:
        raise ValueError("maturities must not precede the observation time")
    damp = math.exp(-spec.beta * abs(T2 - T1)) if spec.beta > 0 else 1.0
    if spec.kind == "lognormal-1f":
        return (
            spec.sigma0**2 * math.exp(-spec.alpha * (tau1 + tau2)) * F1 * F2 * damp
        )
    if spec.kind == "normal-1f":
        return spec.kappa0**2 * math.exp(-spec.alpha * (tau1 + tau2)) * damp
    k1a = spec.kappa10 * math.exp(-spec.alpha1 * tau1)
    k1b = spec.kappa10 * math.exp(-spec.alpha1 * tau2)
    k2a = spec.kappa20 * math.exp(-spec.alpha2 * tau1)
    k2b = spec.kappa20 * math.exp(-spec.alpha2 * tau2)
    return F1 * F2 * (k1a * k1b + k2a * k2b + spec.rho * (k1a * k2b + k2a * k1b))
