"""Time grids, forward curves, curve ingestion and synthetic curve generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class CurveError(ValueError):
    """Raised for malformed or insufficient curve input."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform exercise-time grid on [t_start, t_end], one nomination per step.

    Delivery buckets are indexed k = 0..n_steps-1; bucket k covers
    [times[k], times[k+1]) and is priced at its start time.
    """

    t_end: float
    n_steps: int
    t_start: float = 0.0

    def __post_init__(self) -> None:
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        """Step-boundary times, shape (n_steps + 1,)."""
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    @property
    def deliveries(self) -> np.ndarray:
        """Delivery bucket start times, shape (n_steps,)."""
        return self.times[:-1]

    @property
    def horizon(self) -> float:
        return self.t_end - self.t_start


@dataclass
class ForwardCurve:
    """Forward prices F(obs_time, T) on a fixed set of delivery times.

    In "strictly-positive" mode every price must be > 0; "signed" mode is
    reserved for swing spreads which may cross zero.
    """

    deliveries: np.ndarray
    prices: np.ndarray
    obs_time: float = 0.0
    mode: str = "strictly-positive"

    def __post_init__(self) -> None:
        self.deliveries = np.asarray(self.deliveries, dtype=float)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.deliveries.shape != self.prices.shape or self.deliveries.ndim != 1:
            raise CurveError("deliveries and prices must be 1-d arrays of equal length")
        if self.deliveries.size < 2:
            raise CurveError("curve needs at least 2 delivery points")
        if np.any(np.diff(self.deliveries) <= 0):
            raise CurveError("deliveries must be strictly increasing")
        if self.mode not in ("strictly-positive", "signed"):
            raise CurveError(f"unknown curve mode {self.mode!r}")
        if self.mode == "strictly-positive" and np.any(self.prices <= 0):
            raise CurveError("strictly-positive curve has a price <= 0")

    def price(self, T: float | np.ndarray) -> float | np.ndarray:
        """Piecewise-linear interpolation, flat extrapolation at the ends."""
        return np.interp(T, self.deliveries, self.prices)

    def resample(self, grid: TimeGrid) -> "ForwardCurve":
        """Resample onto the grid's delivery points by linear interpolation."""
        T = grid.deliveries
        return ForwardCurve(T, self.price(T), obs_time=self.obs_time, mode=self.mode)

    def copy(self) -> "ForwardCurve":
        return ForwardCurve(
            self.deliveries.copy(), self.prices.copy(), self.obs_time, self.mode
        )


@dataclass(frozen=True)
class SinusoidSpec:
    """Periodic initial curve F(T) = center + amplitude * sin(omega * T).

    omega = pi * n_humps / horizon, so the curve crosses the center level
    n_humps + 1 times on [0, horizon], at T_i = i * horizon / n_humps.
    """

    center: float
    amplitude: float
    n_humps: int

    def __post_init__(self) -> None:
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")
        if self.n_humps < 1:
            raise ValueError("n_humps must be >= 1")

    def omega(self, horizon: float) -> float:
        return math.pi * self.n_humps / horizon

    def trigger_spacing(self, horizon: float) -> float:
        return horizon / self.n_humps


def make_sinusoid(spec: SinusoidSpec, grid: TimeGrid) -> ForwardCurve:
    """Sample the sinusoid on the grid's delivery points.

    center = 0 (or any center <= amplitude) flips the curve to signed mode,
    as used for swing spreads.
    """
    w = spec.omega(grid.horizon)
    T = grid.deliveries
    prices = spec.center + spec.amplitude * np.sin(w * (T - grid.t_start))
    mode = "strictly-positive" if spec.center > spec.amplitude else "signed"
    return ForwardCurve(T, prices, obs_time=grid.t_start, mode=mode)


def load_curve(path, grid: TimeGrid) -> ForwardCurve:
    """Read a two-column delimited file (delivery time, price) and resample.

    Comma or whitespace delimited, optional header line.  Mode is inferred:
    signed if any price <= 0.
    """
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.replace(",", " ").split()
            try:
                values = [float(p) for p in parts]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise CurveError(f"{path}: cannot parse line {lineno}: {text!r}")
            if len(values) != 2:
                raise CurveError(
                    f"{path}: expected 2 columns on line {lineno}, got {len(values)}"
                )
            rows.append(values)
    if len(rows) < 2:
        raise CurveError(f"{path}: need at least 2 data points, got {len(rows)}")
    data = np.array(rows, dtype=float)
    order = np.argsort(data[:, 0])
    data = data[order]
    if np.any(np.diff(data[:, 0]) <= 0):
        raise CurveError(f"{path}: duplicate delivery times")
    mode = "signed" if np.any(data[:, 1] <= 0) else "strictly-positive"
    raw = ForwardCurve(data[:, 0], data[:, 1], obs_time=grid.t_start, mode=mode)
    return raw.resample(grid)
