"""Deterministic storage optimization.

Two solvers cross-validate each other:

* ``solve_dp``      -- backward induction on a (time, volume) lattice; the
  brute-force reference.
* ``solve_trigger`` -- realizes the bang-bang trigger-price structure: a
  constant trigger price C with dead zone [C - gamma_inj, C + gamma_rel]
  per trajectory segment, segments separated only by volume-boundary
  touches.  The terminal-volume landing is solved exactly on the concave
  piecewise-linear value function of volume (the exact limit of bisecting
  C against the monotone terminal-volume step function), with a vectorized
  interior-trajectory fast path for repeated re-solves.

Also here: the exercise rule, trajectory valuation, the cycle-constraint
solve via a Lagrange multiplier on injected volume, boundary-touch
validation, terminal-volume sensitivities and trigger-curve reconstruction
for carry cost and volume-dependent rates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .curves import ForwardCurve

__all__ = [
    "StorageSpec",
    "Trajectory",
    "Segment",
    "IntrinsicSolution",
    "TouchRecord",
    "TouchReport",
    "ConstraintViolation",
    "InfeasibleError",
    "exercise_rule",
    "value_of",
    "cycle_variable",
    "solve_trigger",
    "solve_dp",
    "solve_with_cycle",
    "sensitivity_qend",
    "sensitivity_qstart",
    "validate_touch_conditions",
    "reconstruct_trigger_curve",
]


class ConstraintViolation(ValueError):
    """A trajectory breaks a volume or rate constraint."""


class InfeasibleError(ValueError):
    """The requested terminal state cannot be reached under the constraints."""


# ---------------------------------------------------------------------------
# contract data
# ---------------------------------------------------------------------------


@dataclass
class StorageSpec:
    """All contract parameters of a storage or swing deal.

    Volume bounds may be scalars or arrays over the n+1 step boundaries.
    Setting ``q_end`` selects the fixed-terminal problem; ``q_end=None`` is
    the free-terminal problem where any remaining volume pays
    ``final_price`` per unit (0 for a swing spread).

    ``rate_fn``, when given, is a pair of callables ``(r_min_of_q,
    r_max_of_q)`` for volume-dependent rates; only ``solve_dp`` accepts it.
    """

    q_min: float | np.ndarray = 0.0
    q_max: float | np.ndarray = 1.0
    r_min: float = -1.0
    r_max: float = 1.0
    q_start: float = 0.0
    q_end: float | None = 0.0
    final_price: float = 0.0
    gamma_inj: float = 0.0
    gamma_rel: float = 0.0
    gamma_carry: float | np.ndarray = 0.0
    c_max: float | None = None
    rate_fn: tuple | None = None

    def __post_init__(self) -> None:
        if self.r_min >= self.r_max:
            raise ValueError("r_min must be < r_max")
        if self.gamma_inj < 0 or self.gamma_rel < 0:
            raise ValueError("operating costs must be nonnegative")

    @property
    def fixed_terminal(self) -> bool:
        return self.q_end is not None

    @property
    def dead_rate(self) -> float:
        """Rate taken inside the dead zone: 0 clipped into [r_min, r_max]."""
        return min(max(0.0, self.r_min), self.r_max)

    def bounds_arrays(self, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Lower/upper volume bounds on the n+1 step boundaries."""
        lo = np.broadcast_to(np.asarray(self.q_min, dtype=float), (n_steps + 1,)).copy()
        hi = np.broadcast_to(np.asarray(self.q_max, dtype=float), (n_steps + 1,)).copy()
        if np.any(lo > hi):
            raise ValueError("q_min exceeds q_max")
        return lo, hi

    def carry_array(self, n_steps: int) -> np.ndarray:
        return np.broadcast_to(
            np.asarray(self.gamma_carry, dtype=float), (n_steps,)
        ).copy()

    def capacity(self, n_steps: int = 1) -> float:
        lo, hi = self.bounds_arrays(n_steps)
        return float(np.max(hi) - np.min(lo))

    def validate(self, n_steps: int, dt: float) -> None:
        lo, hi = self.bounds_arrays(n_steps)
        if not (lo[0] - 1e-12 <= self.q_start <= hi[0] + 1e-12):
            raise ValueError("q_start outside initial volume bounds")
        if self.fixed_terminal:
            if not (lo[-1] - 1e-12 <= self.q_end <= hi[-1] + 1e-12):
                raise InfeasibleError("q_end outside terminal volume bounds")
            reach = self.q_end - self.q_start
            if not (self.r_min * dt * n_steps - 1e-9 <= reach <= self.r_max * dt * n_steps + 1e-9):
                raise InfeasibleError(
                    "terminal volume unreachable: q_end - q_start exceeds "
                    "maximum rate x horizon"
                )
        # Boundaries moving faster than the rate limits cannot be ridden;
        # such specs are rejected rather than projected.
        for name, arr in (("q_min", lo), ("q_max", hi)):
            slope = np.diff(arr) / dt
            if np.any(slope < self.r_min - 1e-9) or np.any(slope > self.r_max + 1e-9):
                raise ValueError(f"{name} moves faster than the rate limits")

    def tail(self, k: int, n_steps: int, q_now: float) -> "StorageSpec":
        """Sub-contract over steps [k, n) starting from volume q_now."""
        lo, hi = self.bounds_arrays(n_steps)
        carry = self.carry_array(n_steps)
        return replace(
            self,
            q_min=lo[k:],
            q_max=hi[k:],
            q_start=q_now,
            gamma_carry=carry[k:],
        )


@dataclass
class Trajectory:
    """Exercise path: volumes on step boundaries, rates per step."""

    volumes: np.ndarray
    rates: np.ndarray
    dt: float

    def __post_init__(self) -> None:
        self.volumes = np.asarray(self.volumes, dtype=float)
        self.rates = np.asarray(self.rates, dtype=float)
        if self.volumes.size != self.rates.size + 1:
            raise ValueError("volumes must have one more entry than rates")

    @classmethod
    def from_rates(cls, q_start: float, rates: np.ndarray, dt: float) -> "Trajectory":
        rates = np.asarray(rates, dtype=float)
        volumes = q_start + np.concatenate(([0.0], np.cumsum(rates * dt)))
        return cls(volumes, rates, dt)

    @property
    def q_start(self) -> float:
        return float(self.volumes[0])

    @property
    def q_end(self) -> float:
        return float(self.volumes[-1])


@dataclass
class Segment:
    """One piece of the optimal trajectory with a single trigger price.

    ``kind`` is "extremal" for pieces strictly between the volume bounds and
    "boundary" for periods riding a bound.  ``c_lo``/``c_hi`` bracket the
    trigger prices consistent with the piece's decisions; ``ambiguous``
    flags plateaus where the trigger is materially non-unique.
    """

    k_start: int
    k_end: int
    trigger: float
    c_lo: float
    c_hi: float
    kind: str = "extremal"
    ambiguous: bool = False

    def dead_zone(self, spec: StorageSpec) -> tuple[float, float]:
        return (self.trigger - spec.gamma_inj, self.trigger + spec.gamma_rel)


@dataclass
class IntrinsicSolution:
    """Optimal deterministic exercise with its trigger structure."""

    trajectory: Trajectory
    value: float
    segments: list
    trigger_times: np.ndarray
    lambda_cycle: float = 0.0
    start_index: int = 0

    @property
    def plateau_flagged(self) -> bool:
        return any(s.ambiguous for s in self.segments)

    def segment_at(self, k: int) -> Segment:
        for seg in self.segments:
            if seg.k_start <= k < seg.k_end:
                return seg
        raise IndexError(f"no segment covers step {k}")

    @property
    def first_extremal(self) -> Segment | None:
        for seg in self.segments:
            if seg.kind == "extremal":
                return seg
        return None

    @property
    def last_extremal(self) -> Segment | None:
        for seg in reversed(self.segments):
            if seg.kind == "extremal":
                return seg
        return None

    @property
    def prompt_trigger(self) -> float:
        """Trigger of the first extremal segment (NaN if riding throughout)."""
        seg = self.first_extremal
        return seg.trigger if seg is not None else math.nan


@dataclass
class TouchRecord:
    time: float
    boundary: str  # "lower" | "upper"
    side: str  # "left" | "right"
    satisfied: bool
    residual: float


@dataclass
class TouchReport:
    records: list

    @property
    def all_satisfied(self) -> bool:
        return all(r.satisfied for r in self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------


def exercise_rule(F: float, C: float, spec: StorageSpec) -> float:
    """Bang-bang rule: release above the dead zone, inject below, else idle.

    Ties at a dead-zone edge resolve to the idle rate (0 clipped into the
    rate bounds), which makes the rule deterministic.
    """
    if F > C + spec.gamma_rel:
        return spec.r_min
    if F < C - spec.gamma_inj:
        return spec.r_max
    return spec.dead_rate


def _op_cost(rates: np.ndarray, spec: StorageSpec) -> np.ndarray:
    """Operating cost per unit time: gamma_inj*r for r>0, -gamma_rel*r for r<0."""
    return np.where(rates > 0, spec.gamma_inj * rates, -spec.gamma_rel * rates)


def _grid_of(curve: ForwardCurve) -> tuple[np.ndarray, float]:
    T = curve.deliveries
    steps = np.diff(T)
    dt = float(steps[0])
    if np.any(np.abs(steps - dt) > 1e-9 * max(dt, 1.0)):
        raise ValueError("curve deliveries must be uniformly spaced")
    return T, dt


def _carry_shift(carry: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative carry integral on step boundaries: C(t_k) = C0 + shift[k]."""
    return np.concatenate(([0.0], np.cumsum(carry * dt)))


def _vol_tol(spec: StorageSpec, n: int) -> float:
    return 1e-9 * max(1.0, spec.capacity(n))


def value_of(traj: Trajectory, curve: ForwardCurve, spec: StorageSpec) -> float:
    """Cash value of a trajectory on a frozen curve.

    Returns -sum_k [r_k F_k + gamma(r_k) + gamma_carry_k q_k] dt, plus
    q_end * final_price in free-terminal mode.  Raises ConstraintViolation
    naming the first violated step if the trajectory is infeasible.
    """
    T, dt = _grid_of(curve)
    n = T.size
    if traj.rates.size != n:
        raise ValueError("trajectory and curve grids differ")
    lo, hi = spec.bounds_arrays(n)
    tol = _vol_tol(spec, n)
    vol = traj.volumes
    bad = np.nonzero((vol < lo - tol) | (vol > hi + tol))[0]
    if bad.size:
        raise ConstraintViolation(
            f"volume bound violated at step {bad[0]}: q={vol[bad[0]]:.6g}"
        )
    rtol = 1e-9 * max(1.0, abs(spec.r_max), abs(spec.r_min))
    bad = np.nonzero(
        (traj.rates < spec.r_min - rtol) | (traj.rates > spec.r_max + rtol)
    )[0]
    if bad.size:
        raise ConstraintViolation(
            f"rate bound violated at step {bad[0]}: r={traj.rates[bad[0]]:.6g}"
        )
    if spec.fixed_terminal and abs(traj.q_end - spec.q_end) > tol:
        raise ConstraintViolation(
            f"terminal volume {traj.q_end:.6g} != q_end {spec.q_end:.6g}"
        )
    carry = spec.carry_array(n)
    cash = -(traj.rates * curve.prices + _op_cost(traj.rates, spec)) * dt
    cash -= carry * vol[:-1] * dt
    value = float(np.sum(cash))
    if not spec.fixed_terminal:
        value += traj.q_end * spec.final_price
    return value


def cycle_variable(traj: Trajectory) -> np.ndarray:
    """Total injected volume by each step boundary; nondecreasing, c[0] = 0."""
    inj = np.maximum(traj.rates, 0.0) * traj.dt
    return np.concatenate(([0.0], np.cumsum(inj)))


# ---------------------------------------------------------------------------
# exact concave piecewise-linear value function of volume
# ---------------------------------------------------------------------------


class _Pwl:
    """Concave piecewise-linear function of volume.

    ``xs``: breakpoints (M+1,), increasing; ``v0``: value at xs[0];
    ``slopes``: (M,), nonincreasing.  Slopes carry price units: the slope at
    volume q is the marginal value of stored gas, i.e. the trigger price of
    the segment through (k, q).  A single-point domain has M = 0.
    """

    __slots__ = ("xs", "v0", "slopes")

    def __init__(self, xs: np.ndarray, v0: float, slopes: np.ndarray):
        self.xs = xs
        self.v0 = v0
        self.slopes = slopes

    def value_at(self, x: float) -> float:
        x = min(max(x, self.xs[0]), self.xs[-1])
        if self.slopes.size == 0:
            return self.v0
        i = int(np.searchsorted(self.xs, x, side="right")) - 1
        i = min(max(i, 0), self.slopes.size - 1)
        v = self.v0 + float(np.dot(self.slopes[:i], np.diff(self.xs[: i + 1])))
        return v + self.slopes[i] * (x - self.xs[i])

    def sup_conv(self, d_lo: float, d_hi: float, s_rel: float, s_inj: float) -> "_Pwl":
        """One backward step: max over displacement d in [d_lo, d_hi].

        ``s_inj`` = F + gamma_inj is the marginal purchase cost, ``s_rel`` =
        F - gamma_rel the marginal sale revenue (s_inj >= s_rel).  New
        domain is [xs[0] - d_hi, xs[-1] - d_lo]; the slope sequences of the
        value function and of the one-step cash merge in decreasing order.
        """
        pieces_s = [self.slopes]
        pieces_l = [np.diff(self.xs)]
        inj_len = max(0.0, d_hi - max(d_lo, 0.0))
        rel_len = max(0.0, min(d_hi, 0.0) - d_lo)
        if inj_len > 0:
            pieces_s.append(np.array([s_inj]))
            pieces_l.append(np.array([inj_len]))
        if rel_len > 0:
            pieces_s.append(np.array([s_rel]))
            pieces_l.append(np.array([rel_len]))
        slopes = np.concatenate(pieces_s)
        lengths = np.concatenate(pieces_l)
        order = np.argsort(-slopes, kind="stable")
        slopes = slopes[order]
        lengths = lengths[order]
        x0 = self.xs[0] - d_hi
        xs = x0 + np.concatenate(([0.0], np.cumsum(lengths)))
        # left edge: forced move d = d_hi into the left edge of the old domain
        cash_dhi = -d_hi * (s_inj if d_hi > 0 else s_rel)
        return _Pwl(xs, self.v0 + cash_dhi, slopes)

    def add_linear(self, slope: float) -> "_Pwl":
        return _Pwl(self.xs, self.v0 + slope * self.xs[0], self.slopes + slope)

    def clip(self, lo: float, hi: float) -> "_Pwl":
        """Restrict the domain to [lo, hi]; raises InfeasibleError if empty."""
        new_lo = max(float(self.xs[0]), lo)
        new_hi = min(float(self.xs[-1]), hi)
        if new_lo > new_hi + 1e-12 * max(1.0, abs(new_hi), abs(new_lo)):
            raise InfeasibleError("volume window empty")
        new_hi = max(new_hi, new_lo)
        v0 = self.value_at(new_lo)
        if self.slopes.size == 0 or new_hi == new_lo:
            return _Pwl(np.array([new_lo]), v0, np.array([]))
        i0 = int(np.searchsorted(self.xs, new_lo, side="right")) - 1
        i0 = min(max(i0, 0), self.slopes.size - 1)
        i1 = int(np.searchsorted(self.xs, new_hi, side="left"))
        i1 = min(max(i1, i0 + 1), self.xs.size - 1)
        xs = self.xs[i0 : i1 + 1].copy()
        slopes = self.slopes[i0:i1].copy()
        xs[0] = new_lo
        xs[-1] = new_hi
        keep = np.diff(xs) > 0
        if not np.all(keep):
            xs = np.concatenate((xs[:1], xs[1:][keep]))
            slopes = slopes[keep]
        return _Pwl(xs, v0, slopes)


def _pwl_backward(
    F: np.ndarray,
    dt: float,
    lo: np.ndarray,
    hi: np.ndarray,
    carry: np.ndarray,
    spec: StorageSpec,
) -> list:
    """Exact value functions V[k](q) for k = n .. 0."""
    n = F.size
    if spec.fixed_terminal:
        q_end = min(max(float(spec.q_end), lo[n]), hi[n])
        V = _Pwl(np.array([q_end]), 0.0, np.array([]))
    else:
        if hi[n] > lo[n]:
            V = _Pwl(
                np.array([lo[n], hi[n]]),
                lo[n] * spec.final_price,
                np.array([spec.final_price]),
            )
        else:
            V = _Pwl(np.array([lo[n]]), lo[n] * spec.final_price, np.array([]))
    out = [None] * (n + 1)
    out[n] = V
    d_lo, d_hi = spec.r_min * dt, spec.r_max * dt
    for k in range(n - 1, -1, -1):
        V = out[k + 1].sup_conv(d_lo, d_hi, F[k] - spec.gamma_rel, F[k] + spec.gamma_inj)
        if carry[k] != 0.0:
            V = V.add_linear(-carry[k] * dt)
        try:
            V = V.clip(lo[k], hi[k])
        except InfeasibleError as exc:
            raise InfeasibleError(
                f"terminal volume unreachable (volume window empty at step {k})"
            ) from exc
        out[k] = V
    return out


def _pwl_replay(
    V: list, F: np.ndarray, dt: float, spec: StorageSpec, q_start: float
) -> np.ndarray:
    """Forward replay of the bang-bang rule against the exact value slopes.

    Injects while the marginal value of stored gas exceeds F + gamma_inj,
    releases while it is below F - gamma_rel; ties stay put (minimal move).
    """
    n = F.size
    rates = np.zeros(n)
    q = min(max(q_start, V[0].xs[0]), V[0].xs[-1])
    d_lo, d_hi = spec.r_min * dt, spec.r_max * dt
    for k in range(n):
        W = V[k + 1]
        xs, slopes = W.xs, W.slopes
        if slopes.size:
            j_inj = int(np.sum(slopes > F[k] + spec.gamma_inj))
            j_rel = int(np.sum(slopes >= F[k] - spec.gamma_rel))
            u_inj = xs[j_inj]
            u_rel = xs[j_rel]
        else:
            u_inj = u_rel = xs[0]
        if u_inj > q:
            d = min(u_inj - q, d_hi)
        elif u_rel < q:
            d = max(u_rel - q, d_lo)
        else:
            d = 0.0
        d = min(max(d, d_lo), d_hi)
        d = min(max(d, xs[0] - q), xs[-1] - q)
        rates[k] = d / dt
        q += d
    return rates


# ---------------------------------------------------------------------------
# interior fast path: candidate trigger enumeration with exact landing
# ---------------------------------------------------------------------------


def _interior_landing(
    F: np.ndarray,
    shift: np.ndarray,
    dt: float,
    lo: np.ndarray,
    hi: np.ndarray,
    spec: StorageSpec,
    warm: float | None = None,
):
    """Single-segment solve valid when the trajectory stays strictly interior.

    Enumerates one candidate trigger per breakpoint interval of
    {F_k +- costs - carry shift}, replays the rule without clipping, and
    lands the terminal volume exactly: either on a plateau of the monotone
    terminal-volume step function, or at a breakpoint with one fractional
    step.  A strictly interior trajectory satisfies the stationarity and
    complementarity conditions of this concave program, so the result is
    globally optimal.  Returns None when no interior landing exists.
    """
    n = F.size
    a = F + spec.gamma_inj - shift[:-1]  # C > a_k -> inject at step k
    b = F - spec.gamma_rel - shift[:-1]  # C < b_k -> release at step k
    dead = spec.dead_rate
    tolv = _vol_tol(spec, n)
    q0 = spec.q_start

    if not spec.fixed_terminal:
        # free terminal: last-segment trigger level equals the final unit
        # price at the horizon, shifted back through the carry integral
        c0 = spec.final_price - shift[-1]
        rates = np.where(c0 > a, spec.r_max, np.where(c0 < b, spec.r_min, dead))
        vols = q0 + np.cumsum(rates * dt)
        interior = vols[:-1] if n > 1 else vols[:0]
        if np.all(interior > lo[1:n] + tolv) and np.all(interior < hi[1:n] - tolv):
            if lo[n] - tolv <= vols[-1] <= hi[n] + tolv:
                return rates, None
        return None

    target = float(spec.q_end)
    bps = np.unique(np.concatenate((a, b)))
    m_full = bps.size + 1

    def candidates_for(idx: np.ndarray) -> np.ndarray:
        mids = np.empty(idx.size)
        for out_i, i in enumerate(idx):
            if i == 0:
                mids[out_i] = bps[0] - 1.0
            elif i == m_full - 1:
                mids[out_i] = bps[-1] + 1.0
            else:
                mids[out_i] = 0.5 * (bps[i - 1] + bps[i])
        return mids

    if warm is not None and np.isfinite(warm) and m_full > 40:
        center = int(np.searchsorted(bps, warm))
        windows = [16, 64, None]
    else:
        center = 0
        windows = [None]

    for w in windows:
        if w is None:
            idx = np.arange(m_full)
        else:
            idx = np.arange(max(0, center - w), min(m_full, center + w + 1))
        C = candidates_for(idx)
        rates = np.where(
            C[:, None] > a[None, :],
            spec.r_max,
            np.where(C[:, None] < b[None, :], spec.r_min, dead),
        )
        vols = q0 + np.cumsum(rates * dt, axis=1)
        if n > 1:
            inner = vols[:, :-1]
            ok = np.all(inner > lo[1:n] + tolv, axis=1) & np.all(
                inner < hi[1:n] - tolv, axis=1
            )
        else:
            ok = np.ones(C.size, dtype=bool)
        terminal = vols[:, -1]

        exact = ok & (np.abs(terminal - target) <= tolv)
        if np.any(exact):
            row = int(np.argmax(exact))
            return rates[row], None

        pos = int(np.searchsorted(terminal, target))
        i_lo, i_hi = pos - 1, pos
        if 0 <= i_lo and i_hi < C.size and terminal[i_lo] < target < terminal[i_hi]:
            if idx[i_hi] - idx[i_lo] != 1:
                continue  # window gap; widen
            if not (ok[i_lo] and ok[i_hi]):
                return None
            pin = bps[idx[i_lo]]  # breakpoint between the two intervals
            delta = rates[i_hi] - rates[i_lo]
            tied = np.nonzero(delta > 0)[0]
            caps = delta[tied] * dt
            # per-unit value of activating each tied step: -(pin + carry to
            # horizon); differs across steps only through the carry integral
            unit = -(pin + shift[tied]) - (shift[-1] - shift[tied + 1])
            order = tied[np.argsort(-unit, kind="stable")]
            caps = delta[order] * dt
            need = target - terminal[i_lo]
            mixed = rates[i_lo].copy()
            for s, cap in zip(order, caps):
                take = min(cap, need)
                mixed[s] += take / dt
                need -= take
                if need <= tolv:
                    break
            return mixed, float(pin)
        if w is None:
            return None
        if 0 <= i_lo and i_hi < C.size:
            # straddle found but window gap or contact: widen / bail above
            continue
    return None


# ---------------------------------------------------------------------------
# segment extraction and trigger times
# ---------------------------------------------------------------------------


def _extract_segments(
    F: np.ndarray,
    shift: np.ndarray,
    dt: float,
    traj: Trajectory,
    lo: np.ndarray,
    hi: np.ndarray,
    spec: StorageSpec,
    rate_tol: float | None = None,
    gamma_inj: float | None = None,
    gamma_rel: float | None = None,
) -> list:
    """Reverse-engineer per-segment trigger prices from an optimal path.

    Trigger prices are reported in start-of-horizon units: the price level
    applying at step k is ``trigger + shift[k]``.
    """
    n = F.size
    gi = spec.gamma_inj if gamma_inj is None else gamma_inj
    gr = spec.gamma_rel if gamma_rel is None else gamma_rel
    a = F + gi - shift[:-1]
    b = F - gr - shift[:-1]
    tolv = _vol_tol(spec, n)
    rtol = rate_tol if rate_tol is not None else 1e-7 * max(
        1.0, abs(spec.r_max), abs(spec.r_min)
    )
    vol = traj.volumes
    at_lo = vol <= lo + tolv
    at_hi = vol >= hi - tolv
    touched = at_lo | at_hi
    ride = (at_lo[:-1] & at_lo[1:]) | (at_hi[:-1] & at_hi[1:])

    segments: list[Segment] = []
    k = 0
    while k < n:
        k2 = k + 1
        # a boundary touch (even a point touch) separates segments
        while k2 < n and ride[k2] == ride[k] and (ride[k] or not touched[k2]):
            k2 += 1
        if ride[k]:
            riding_hi = bool(at_hi[k])
            c_lo, c_hi = -math.inf, math.inf
            if riding_hi:
                c_lo = float(np.max(b[k:k2]))  # not releasing while full
            else:
                c_hi = float(np.min(a[k:k2]))  # not injecting while empty
            trig = c_lo if math.isfinite(c_lo) else c_hi
            segments.append(
                Segment(k, k2, trig, c_lo, c_hi, kind="boundary", ambiguous=True)
            )
        else:
            dead = spec.dead_rate
            c_lo, c_hi = -math.inf, math.inf
            pins: list[float] = []
            for j in range(k, k2):
                r = traj.rates[j]
                if r >= spec.r_max - rtol:
                    c_lo = max(c_lo, a[j])
                elif r <= spec.r_min + rtol:
                    c_hi = min(c_hi, b[j])
                elif abs(r - dead) <= rtol:
                    c_lo = max(c_lo, b[j])
                    c_hi = min(c_hi, a[j])
                elif r > dead:
                    pins.append(a[j])
                else:
                    pins.append(b[j])
            if pins:
                trig = float(np.median(pins))
                c_lo = max(c_lo, trig)
                c_hi = min(c_hi, trig)
                ambiguous = False
            elif math.isfinite(c_lo) and math.isfinite(c_hi):
                trig = 0.5 * (c_lo + c_hi)
                f_eff = F[k:k2] - shift[k:k2]
                local = np.max(np.abs(np.diff(f_eff))) if k2 - k > 1 else 0.0
                ambiguous = (c_hi - c_lo) > 2.0 * local + 1e-9 * max(1.0, abs(trig))
            elif math.isfinite(c_lo):
                trig, ambiguous = c_lo, True
            elif math.isfinite(c_hi):
                trig, ambiguous = c_hi, True
            else:
                trig, ambiguous = math.nan, True
            segments.append(Segment(k, k2, trig, c_lo, c_hi, ambiguous=ambiguous))
        k = k2
    return segments


def _trigger_times(
    T: np.ndarray,
    F: np.ndarray,
    shift: np.ndarray,
    segments: list,
    spec: StorageSpec,
) -> np.ndarray:
    """Delivery times where F crosses the dead-zone edges, per segment."""
    times: list[float] = []
    f_eff = F - shift[:-1]
    for seg in segments:
        if seg.kind != "extremal" or not math.isfinite(seg.trigger):
            continue
        for edge in {seg.trigger - spec.gamma_inj, seg.trigger + spec.gamma_rel}:
            g = f_eff[seg.k_start : seg.k_end] - edge
            t = T[seg.k_start : seg.k_end]
            zero = np.abs(g) <= 1e-12 * max(1.0, abs(edge))
            for i in np.nonzero(zero)[0]:
                times.append(float(t[i]))
            s = np.sign(g)
            flip = np.nonzero((s[:-1] * s[1:] < 0))[0]
            for i in flip:
                frac = g[i] / (g[i] - g[i + 1])
                times.append(float(t[i] + frac * (t[i + 1] - t[i])))
    if not times:
        return np.array([])
    times = np.sort(np.array(times))
    keep = np.concatenate(([True], np.diff(times) > 1e-12))
    return times[keep]


# ---------------------------------------------------------------------------
# solvers
# ---------------------------------------------------------------------------


def solve_trigger(
    curve: ForwardCurve,
    spec: StorageSpec,
    warm_trigger: float | None = None,
) -> IntrinsicSolution:
    """Optimal exercise via the trigger-price structure.

    Fixed-terminal mode lands the terminal volume exactly; free-terminal
    mode replays the rule with the trigger pinned to the final unit price
    (zero for swing).  Requires constant rate bounds; volume-dependent
    rates are only handled by ``solve_dp``.
    """
    if spec.rate_fn is not None:
        raise ValueError("solve_trigger requires constant rate bounds; use solve_dp")
    T, dt = _grid_of(curve)
    n = T.size
    spec.validate(n, dt)
    lo, hi = spec.bounds_arrays(n)
    carry = spec.carry_array(n)
    shift = _carry_shift(carry, dt)
    F = curve.prices

    rates = None
    fast = _interior_landing(F, shift, dt, lo, hi, spec, warm=warm_trigger)
    if fast is not None:
        rates, _pin = fast
    else:
        V = _pwl_backward(F, dt, lo, hi, carry, spec)
        if not (V[0].xs[0] - _vol_tol(spec, n) <= spec.q_start <= V[0].xs[-1] + _vol_tol(spec, n)):
            raise InfeasibleError(
                "terminal volume unreachable from q_start under the volume bounds"
            )
        rates = _pwl_replay(V, F, dt, spec, spec.q_start)
    rates = np.clip(rates, spec.r_min, spec.r_max)
    traj = Trajectory.from_rates(spec.q_start, rates, dt)
    if spec.fixed_terminal:
        # snap terminal float dust onto q_end through the last active step
        gap = spec.q_end - traj.q_end
        if abs(gap) > 0 and abs(gap) <= 10 * _vol_tol(spec, n):
            traj.rates[-1] += gap / dt
            traj.volumes[-1] = spec.q_end
    segments = _extract_segments(F, shift, dt, traj, lo, hi, spec)
    trig_times = _trigger_times(T, F, shift, segments, spec)
    value = value_of(traj, curve, spec)
    return IntrinsicSolution(traj, value, segments, trig_times)


def solve_dp(
    curve: ForwardCurve, spec: StorageSpec, n_volume_levels: int
) -> IntrinsicSolution:
    """Reference dynamic-programming solve on a uniform volume lattice.

    Per-step actions are all lattice levels reachable within the rate
    bounds, so bang-bang endpoints are exact whenever rate x dt is a
    multiple of the lattice pitch.  ``q_start``/``q_end`` must sit on (or
    within half a pitch of) a level; they are snapped.
    """
    if n_volume_levels < 2:
        raise ValueError("n_volume_levels must be >= 2")
    T, dt = _grid_of(curve)
    n = T.size
    spec.validate(n, dt)
    lo, hi = spec.bounds_arrays(n)
    carry = spec.carry_array(n)
    F = curve.prices
    g0, g1 = float(np.min(lo)), float(np.max(hi))
    if g1 <= g0:
        raise ValueError("degenerate volume range")
    L = int(n_volume_levels)
    levels = np.linspace(g0, g1, L)
    pitch = (g1 - g0) / (L - 1)

    a_min = math.ceil(spec.r_min * dt / pitch - 1e-9)
    a_max = math.floor(spec.r_max * dt / pitch + 1e-9)
    if a_min > a_max:
        raise ValueError("volume grid too coarse for the rate bounds")
    width = a_max - a_min + 1
    moves = (np.arange(a_min, a_max + 1)) * pitch
    op = np.where(moves > 0, spec.gamma_inj * moves, -spec.gamma_rel * moves)

    rate_mask = None
    if spec.rate_fn is not None:
        r_lo_fn, r_hi_fn = spec.rate_fn
        r_lo = np.array([r_lo_fn(q) for q in levels])
        r_hi = np.array([r_hi_fn(q) for q in levels])
        rate_mask = (moves[None, :] >= r_lo[:, None] * dt - 1e-9 * pitch) & (
            moves[None, :] <= r_hi[:, None] * dt + 1e-9 * pitch
        )

    def snap(q: float, what: str) -> int:
        j = int(round((q - g0) / pitch))
        j = min(max(j, 0), L - 1)
        if abs(levels[j] - q) > 0.5 * pitch + 1e-12:
            raise ValueError(f"{what} does not sit on the volume lattice")
        return j

    NEG = -np.inf
    if spec.fixed_terminal:
        j_end = snap(float(spec.q_end), "q_end")
        V = np.full(L, NEG)
        V[j_end] = 0.0
    else:
        V = levels * spec.final_price
    V[(levels < lo[n] - 1e-9 * pitch) | (levels > hi[n] + 1e-9 * pitch)] = NEG

    choices = np.empty((n, L), dtype=np.int32)
    # vanishing do-nothing preference: resolves exact value ties toward the
    # idle action without affecting the optimum beyond float noise
    tie_eps = 1e-11 * max(1.0, float(np.max(np.abs(F)))) * np.abs(moves)
    for k in range(n - 1, -1, -1):
        W = np.full(L + width - 1, NEG)
        i0 = max(0, -a_min)
        v0 = i0 + a_min
        cnt = min(L - v0, L + width - 1 - i0)
        W[i0 : i0 + cnt] = V[v0 : v0 + cnt]
        win = np.lib.stride_tricks.sliding_window_view(W, width)
        cash = -(moves * F[k] + op) - tie_eps
        tot = win + cash[None, :]
        if rate_mask is not None:
            tot = np.where(rate_mask, tot, NEG)
        choices[k] = np.argmax(tot, axis=1)
        V = tot[np.arange(L), choices[k]]
        if carry[k] != 0.0:
            V = V - carry[k] * levels * dt
        V = np.where(
            (levels < lo[k] - 1e-9 * pitch) | (levels > hi[k] + 1e-9 * pitch), NEG, V
        )

    j0 = snap(spec.q_start, "q_start")
    if not np.isfinite(V[j0]):
        raise InfeasibleError("terminal volume unreachable on the DP lattice")

    rates = np.empty(n)
    j = j0
    for k in range(n):
        aa = int(choices[k][j]) + a_min
        rates[k] = aa * pitch / dt
        j += aa
    traj = Trajectory.from_rates(levels[j0], rates, dt)
    shift = _carry_shift(carry, dt)
    segments = _extract_segments(
        F, shift, dt, traj, lo, hi, spec, rate_tol=1.05 * pitch / dt
    )
    trig_times = _trigger_times(T, F, shift, segments, spec)
    value = value_of(traj, curve, spec)
    return IntrinsicSolution(traj, value, segments, trig_times)


def solve_with_cycle(curve: ForwardCurve, spec: StorageSpec) -> IntrinsicSolution:
    """Enforce the intake-cycle cap via a Lagrange multiplier.

    Solves unconstrained first; when the cap binds, bisects a multiplier
    added to the injection cost (widening the dead zone) until the
    cumulative intake lands exactly on c_max, mixing the two bracketing
    bang-bang solutions for the exact landing.
    """
    if spec.c_max is None:
        raise ValueError("spec.c_max is required")
    if spec.rate_fn is not None:
        raise ValueError("cycle solve requires constant rate bounds")
    T, dt = _grid_of(curve)
    n = T.size
    tol = 1e-6 * max(1.0, spec.capacity(n))
    base = solve_trigger(curve, spec)
    c_end = float(cycle_variable(base.trajectory)[-1])
    if c_end <= spec.c_max + tol:
        return base

    min_intake = max(0.0, (spec.q_end - spec.q_start) if spec.fixed_terminal else 0.0)
    if spec.c_max < min_intake - tol:
        raise InfeasibleError(
            "cycle cap below the unavoidable injection q_end - q_start"
        )

    def solve_lam(lam: float) -> tuple[IntrinsicSolution, float]:
        widened = replace(spec, gamma_inj=spec.gamma_inj + lam, c_max=None)
        sol = solve_trigger(curve, widened)
        return sol, float(cycle_variable(sol.trajectory)[-1])

    scale = max(1.0, float(np.max(np.abs(curve.prices))))
    lam_hi = scale
    sol_hi, c_hi = solve_lam(lam_hi)
    guard = 0
    while c_hi > spec.c_max - tol and guard < 60:
        lam_hi *= 2.0
        sol_hi, c_hi = solve_lam(lam_hi)
        guard += 1
    if c_hi > spec.c_max + tol:
        raise InfeasibleError("cycle cap unreachable even with infinite costs")

    lam_lo, sol_lo, c_lo = 0.0, base, c_end
    for _ in range(100):
        if lam_hi - lam_lo <= 1e-9 * scale:
            break
        mid = 0.5 * (lam_lo + lam_hi)
        sol_mid, c_mid = solve_lam(mid)
        if c_mid > spec.c_max:
            lam_lo, sol_lo, c_lo = mid, sol_mid, c_mid
        else:
            lam_hi, sol_hi, c_hi = mid, sol_mid, c_mid
    lam_star = 0.5 * (lam_lo + lam_hi)

    if abs(c_hi - spec.c_max) <= tol:
        theta = 0.0
    else:
        # intake of the theta-mix is convex and continuous, endpoints straddle
        r_lo_arr = sol_lo.trajectory.rates
        r_hi_arr = sol_hi.trajectory.rates

        def intake(theta: float) -> float:
            mix = theta * r_lo_arr + (1 - theta) * r_hi_arr
            return float(np.sum(np.maximum(mix, 0.0)) * dt)

        t_lo, t_hi = 0.0, 1.0
        for _ in range(100):
            tm = 0.5 * (t_lo + t_hi)
            if intake(tm) > spec.c_max:
                t_hi = tm
            else:
                t_lo = tm
            if t_hi - t_lo < 1e-15:
                break
        theta = 0.5 * (t_lo + t_hi)

    rates = theta * sol_lo.trajectory.rates + (1 - theta) * sol_hi.trajectory.rates
    traj = Trajectory.from_rates(spec.q_start, rates, dt)
    # enforce the exact landing on c_max by trimming the marginal injection
    c_now = float(np.sum(np.maximum(rates, 0.0)) * dt)
    excess = c_now - spec.c_max
    if abs(excess) > tol and excess > 0:
        pos = np.nonzero(rates > 0)[0]
        for j in pos[::-1]:
            cut = min(rates[j] * dt, excess)
            rates[j] -= cut / dt
            excess -= cut
            if excess <= 0:
                break
        traj = Trajectory.from_rates(spec.q_start, rates, dt)

    lo_b, hi_b = spec.bounds_arrays(n)
    carry = spec.carry_array(n)
    shift = _carry_shift(carry, dt)
    segments = _extract_segments(
        curve.prices,
        shift,
        dt,
        traj,
        lo_b,
        hi_b,
        spec,
        gamma_inj=spec.gamma_inj + lam_star,
    )
    trig_times = _trigger_times(T, curve.prices, shift, segments, spec)
    value = value_of(traj, curve, spec)
    return IntrinsicSolution(traj, value, segments, trig_times, lambda_cycle=lam_star)


# ---------------------------------------------------------------------------
# sensitivities, touch validation, trigger-curve reconstruction
# ---------------------------------------------------------------------------


def _terminal_shift(spec: StorageSpec, n: int, dt: float) -> float:
    return float(_carry_shift(spec.carry_array(n), dt)[-1])


def sensitivity_qend(
    curve: ForwardCurve, spec: StorageSpec, solution: IntrinsicSolution | None = None
) -> float:
    """dS/dq_end: minus the trigger level of the last trajectory piece.

    Free-terminal mode returns final_price - C, which vanishes at the
    optimum.  Warns when the trigger is plateau-flagged (set-valued
    derivative).
    """
    sol = solution if solution is not None else solve_trigger(curve, spec)
    seg = sol.last_extremal
    T, dt = _grid_of(curve)
    if seg is None or seg.ambiguous or not math.isfinite(seg.trigger):
        warnings.warn("trigger plateau: dS/dq_end is set-valued", RuntimeWarning)
    c_term = (seg.trigger if seg is not None else math.nan) + _terminal_shift(
        spec, T.size, dt
    )
    if spec.fixed_terminal:
        return -c_term
    return spec.final_price - c_term


def sensitivity_qstart(
    curve: ForwardCurve, spec: StorageSpec, solution: IntrinsicSolution | None = None
) -> float:
    """dS/dq_start: the trigger level of the first trajectory piece."""
    sol = solution if solution is not None else solve_trigger(curve, spec)
    seg = sol.first_extremal
    if seg is None or seg.ambiguous or not math.isfinite(seg.trigger):
        warnings.warn("trigger plateau: dS/dq_start is set-valued", RuntimeWarning)
    return seg.trigger if seg is not None else math.nan


def validate_touch_conditions(
    sol: IntrinsicSolution, curve: ForwardCurve, spec: StorageSpec
) -> TouchReport:
    """Check the four boundary-touch conditions at every interior touch.

    A touch of the lower bound from the left requires F = C + gamma_rel
    with the curve falling; the other three cases are the mirror images.
    F-equality is tested against the adjacent segment's dead-zone edge
    within one grid step's price movement; the endpoints are exempt.
    """
    T, dt = _grid_of(curve)
    n = T.size
    lo, hi = spec.bounds_arrays(n)
    carry = spec.carry_array(n)
    shift = _carry_shift(carry, dt)
    f_eff = curve.prices - shift[:-1]
    tolv = _vol_tol(spec, n)
    vol = sol.trajectory.volumes
    at_lo = vol <= lo + tolv
    at_hi = vol >= hi - tolv

    def local_tol(k: int) -> float:
        diffs = []
        if k > 0:
            diffs.append(abs(f_eff[k] - f_eff[k - 1]))
        if k < n - 1:
            diffs.append(abs(f_eff[k + 1] - f_eff[k]))
        return max(diffs) + 1e-9 * max(1.0, abs(f_eff[k])) if diffs else math.inf

    def slope(k: int) -> float:
        if 0 < k < n - 1:
            return (f_eff[k + 1] - f_eff[k - 1]) / (2 * dt)
        if k == 0:
            return (f_eff[1] - f_eff[0]) / dt
        return (f_eff[n - 1] - f_eff[n - 2]) / dt

    def segment_trigger(k_step: int) -> float:
        try:
            seg = sol.segment_at(min(max(k_step, 0), n - 1))
        except IndexError:
            return math.nan
        return seg.trigger

    records: list[TouchRecord] = []
    for mask, boundary in ((at_lo, "lower"), (at_hi, "upper")):
        k = 1
        while k < n:
            if not mask[k]:
                k += 1
                continue
            k2 = k
            while k2 < n and mask[k2]:
                k2 += 1
            # episode covers boundaries [k, k2); interior endpoints only
            if k >= 1 and not mask[k - 1]:
                c_left = segment_trigger(k - 1)
                if boundary == "lower":
                    resid = f_eff[min(k, n - 1)] - (c_left + spec.gamma_rel)
                    ok = abs(resid) <= local_tol(min(k, n - 1)) and slope(
                        min(k, n - 1)
                    ) <= local_tol(min(k, n - 1)) / dt
                else:
                    resid = f_eff[min(k, n - 1)] - (c_left - spec.gamma_inj)
                    ok = abs(resid) <= local_tol(min(k, n - 1)) and slope(
                        min(k, n - 1)
                    ) >= -local_tol(min(k, n - 1)) / dt
                if math.isnan(resid):
                    ok = False
                records.append(
                    TouchRecord(float(T[0] + (k) * dt), boundary, "left", bool(ok), float(resid))
                )
            if k2 <= n - 1:
                c_right = segment_trigger(k2 - 1 if k2 - 1 < n else n - 1)
                c_right = segment_trigger(min(k2, n - 1))
                kk = min(k2 - 1, n - 1)
                if boundary == "lower":
                    resid = f_eff[kk] - (c_right - spec.gamma_inj)
                    ok = abs(resid) <= local_tol(kk) and slope(kk) <= local_tol(kk) / dt
                else:
                    resid = f_eff[kk] - (c_right + spec.gamma_rel)
                    ok = abs(resid) <= local_tol(kk) and slope(kk) >= -local_tol(kk) / dt
                if math.isnan(resid):
                    ok = False
                records.append(
                    TouchRecord(float(T[0] + k2 * dt), boundary, "right", bool(ok), float(resid))
                )
            k = k2
    return TouchReport(records)


def reconstruct_trigger_curve(
    sol: IntrinsicSolution, curve: ForwardCurve, spec: StorageSpec
) -> np.ndarray:
    """Trigger price per step implied by the solution.

    Constant per segment with constant rates and no carry; grows at the
    carry-cost rate; for volume-dependent rates integrates
    dC/dt = r'(q) (C - F - gamma') forward along the trajectory from each
    segment's starting level.  Boundary-riding periods carry NaN.
    """
    T, dt = _grid_of(curve)
    n = T.size
    carry = spec.carry_array(n)
    shift = _carry_shift(carry, dt)
    F = curve.prices
    out = np.full(n, math.nan)
    eps = 1e-6 * max(1.0, spec.capacity(n))
    rtol = 1e-7 * max(1.0, abs(spec.r_max), abs(spec.r_min))
    for seg in sol.segments:
        if seg.kind != "extremal" or not math.isfinite(seg.trigger):
            continue
        if spec.rate_fn is None:
            out[seg.k_start : seg.k_end] = seg.trigger + shift[seg.k_start : seg.k_end]
            continue
        r_lo_fn, r_hi_fn = spec.rate_fn
        ks = range(seg.k_start, seg.k_end)
        # stepwise affine recursion C_{k+1} = A C_k + b makes C_k linear in
        # the free constant C0 at the segment start
        A = np.empty(seg.k_end - seg.k_start)
        B = np.empty_like(A)
        A[0], B[0] = 1.0, 0.0
        for i, k in enumerate(ks):
            r = sol.trajectory.rates[k]
            q = sol.trajectory.volumes[k]
            if r > rtol:
                rprime = (r_hi_fn(q + eps) - r_hi_fn(q - eps)) / (2 * eps)
                gp = spec.gamma_inj
            elif r < -rtol:
                rprime = (r_lo_fn(q + eps) - r_lo_fn(q - eps)) / (2 * eps)
                gp = -spec.gamma_rel
            else:
                rprime, gp = 0.0, 0.0
            if i + 1 < A.size:
                A[i + 1] = A[i] * (1.0 + dt * rprime)
                B[i + 1] = B[i] * (1.0 + dt * rprime) + dt * (
                    carry[k] - rprime * (F[k] + gp)
                )
        # anchor C0 so the curve reproduces the exercise decisions:
        # inject steps need C_k > F_k + gamma_inj, release steps the mirror
        scale = max(1.0, float(np.max(np.abs(F))))
        for slack in (1e-9 * scale, 1e-6 * scale, 1e-3 * scale, 0.1 * scale):
            c_lo, c_hi = -math.inf, math.inf
            ok = True
            for i, k in enumerate(ks):
                if A[i] <= 0:
                    ok = False
                    break
                r = sol.trajectory.rates[k]
                above = (F[k] + spec.gamma_inj + slack - B[i]) / A[i]
                below = (F[k] - spec.gamma_rel - slack - B[i]) / A[i]
                if r > rtol:
                    c_lo = max(c_lo, above)
                elif r < -rtol:
                    c_hi = min(c_hi, below)
                else:
                    c_lo = max(c_lo, below)
                    c_hi = min(c_hi, above)
            if ok and c_lo <= c_hi:
                break
        if not ok or c_lo > c_hi:
            c0 = seg.trigger
        elif math.isfinite(c_lo) and math.isfinite(c_hi):
            c0 = 0.5 * (c_lo + c_hi)
        elif math.isfinite(c_lo):
            c0 = c_lo
        elif math.isfinite(c_hi):
            c0 = c_hi
        else:
            c0 = seg.trigger
        out[seg.k_start : seg.k_end] = A * c0 + B
    return out
