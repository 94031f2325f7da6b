"""Storage and swing option valuation engine.

Layers, each cross-validating the next:

* intrinsic  -- deterministic bang-bang optimization with trigger prices
* process    -- mean-reverting forward-curve simulation
* rolling    -- rolling-intrinsic Monte Carlo with a hedge ledger
* analytic   -- closed-form time-value formulas and their asymptotics
"""

from .curves import CurveError, ForwardCurve, SinusoidSpec, TimeGrid, load_curve, make_sinusoid
from .intrinsic import (
    ConstraintViolation,
    InfeasibleError,
    IntrinsicSolution,
    Segment,
    StorageSpec,
    TouchReport,
    Trajectory,
    cycle_variable,
    exercise_rule,
    reconstruct_trigger_curve,
    sensitivity_qend,
    sensitivity_qstart,
    solve_dp,
    solve_trigger,
    solve_with_cycle,
    validate_touch_conditions,
    value_of,
)

__version__ = "0.1.0"
