"""Shared fixtures: random instance generation and brute-force oracles."""

import itertools

import numpy as np

from storval.curves import ForwardCurve, SinusoidSpec, TimeGrid, make_sinusoid
from storval.intrinsic import StorageSpec, Trajectory, value_of


def random_instance(rng, n_steps=64, n_levels=512, costs=False):
    """Random positive curve plus feasible lattice-aligned storage contract.

    Rates and endpoints are multiples of the DP pitch so the lattice can
    represent the continuum optimum exactly; capacity is 1.
    """
    grid = TimeGrid(t_end=1.0, n_steps=n_steps)
    steps = rng.normal(0.0, 0.25, n_steps)
    prices = 20.0 * np.exp(np.cumsum(steps) - np.mean(np.cumsum(steps)))
    prices = np.clip(prices, 2.0, 120.0)
    curve = ForwardCurve(grid.deliveries, prices)

    pitch = 1.0 / (n_levels - 1)
    dt = grid.dt
    k_up = int(rng.integers(8, 72))
    k_dn = int(rng.integers(8, 72))
    r_max = k_up * pitch / dt
    r_min = -k_dn * pitch / dt
    j_start = int(rng.integers(0, n_levels))
    reach = (
        np.floor(np.array([k_up, k_dn]) * n_steps).astype(int)
    )
    lo_end = max(0, j_start - k_dn * n_steps)
    hi_end = min(n_levels - 1, j_start + k_up * n_steps)
    j_end = int(rng.integers(lo_end, hi_end + 1))
    gamma_inj = float(rng.uniform(0.0, 1.5)) if costs else 0.0
    gamma_rel = float(rng.uniform(0.0, 1.5)) if costs else 0.0
    spec = StorageSpec(
        q_min=0.0,
        q_max=1.0,
        r_min=r_min,
        r_max=r_max,
        q_start=j_start * pitch,
        q_end=j_end * pitch,
        gamma_inj=gamma_inj,
        gamma_rel=gamma_rel,
    )
    return curve, spec


def brute_force_value(curve, spec, n_levels=9):
    """Exhaustive search over lattice trajectories; only for tiny grids."""
    n = curve.deliveries.size
    dt = float(np.diff(curve.deliveries)[0])
    lo, hi = spec.bounds_arrays(n)
    levels = np.linspace(float(np.min(lo)), float(np.max(hi)), n_levels)
    pitch = levels[1] - levels[0]
    best = -np.inf
    start = levels[np.argmin(np.abs(levels - spec.q_start))]
    for path in itertools.product(range(n_levels), repeat=n):
        vols = np.concatenate(([start], levels[list(path)]))
        rates = np.diff(vols) / dt
        if np.any(rates < spec.r_min - 1e-9) or np.any(rates > spec.r_max + 1e-9):
            continue
        if np.any(vols < lo - 1e-9) or np.any(vols > hi + 1e-9):
            continue
        if spec.fixed_terminal and abs(vols[-1] - spec.q_end) > pitch / 4:
            continue
        traj = Trajectory(vols, rates, dt)
        best = max(best, value_of(traj, curve, spec))
    return best


def benchmark_sinusoid(n_steps=128, n_humps=4, center=20.0, amplitude=5.0):
    grid = TimeGrid(t_end=1.0, n_steps=n_steps)
    curve = make_sinusoid(SinusoidSpec(center, amplitude, n_humps), grid)
    return grid, curve


def nonflexible_storage(grid, n_humps=4, dr=2.0, q_room=10.0):
    """Storage wide enough that the sinusoid optimum never touches bounds."""
    swing = dr / 2.0 * (grid.horizon / n_humps)
    cap = q_room * swing
    return StorageSpec(
        q_min=0.0,
        q_max=cap,
        r_min=-dr / 2.0,
        r_max=dr / 2.0,
        q_start=cap / 2.0,
        q_end=cap / 2.0,
    )
