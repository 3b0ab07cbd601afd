"""Solvable kinetics for arm-limited coagulation.

Particles carry a size and a number of binding arms; merges consume
arms (one or two depending on the model variant) and the resulting
two-variable kinetic systems admit exact solutions by convolution
powers of the initial arm law. The package provides those closed forms,
a truncated adaptive ODE integrator to validate them, generating
function transport, an exact stochastic simulator, and a CLI tying the
routes together.
"""

from .closed_form import (
    CriticalTime,
    ModelSpec,
    critical_time,
    model_spec,
    normalize_model,
    oriented_ct,
    oriented_limit,
    oriented_table,
    oriented_totals,
    series_moments,
    size_marginal,
    smoluchowski_reference,
    symmetric_arm_moment,
    symmetric_ct,
    symmetric_limit,
    symmetric_second_factorial,
    symmetric_table,
)
from .characteristics import (
    MonomerGF,
    SeriesTable,
    eval_gt,
    eval_kt,
    lagrange_series,
    solve_h,
    transport_residual,
)
from .errors import (
    ArmcoagError,
    BlowUpError,
    DomainError,
    LeakToleranceError,
    NormalizationError,
    SolverFailureError,
    UnsupportedRegimeError,
    ValidationError,
)
from .kinetics import (
    ConcentrationGrid,
    StepStats,
    Trajectory,
    TruncationSpec,
    detect_gamma_r,
    integrate,
    reference_trajectory,
    rhs_oriented,
    rhs_symmetric,
    weak_residual,
)
from .measures import (
    DiscreteMeasure,
    MomentSummary,
    arm_shift,
    binomial_arms,
    borel,
    convolution_power,
    convolve,
    dirac,
    generating_function,
    make_measure,
    moments,
    negative_binomial_arms,
    poisson_arms,
)
from .montecarlo import MCResult, simulate

__version__ = "0.1.0"

__all__ = [
    "ArmcoagError",
    "BlowUpError",
    "ConcentrationGrid",
    "CriticalTime",
    "DiscreteMeasure",
    "DomainError",
    "LeakToleranceError",
    "MCResult",
    "ModelSpec",
    "MomentSummary",
    "MonomerGF",
    "NormalizationError",
    "SeriesTable",
    "SolverFailureError",
    "StepStats",
    "Trajectory",
    "TruncationSpec",
    "UnsupportedRegimeError",
    "ValidationError",
    "arm_shift",
    "binomial_arms",
    "borel",
    "convolution_power",
    "convolve",
    "critical_time",
    "detect_gamma_r",
    "dirac",
    "eval_gt",
    "eval_kt",
    "generating_function",
    "integrate",
    "lagrange_series",
    "make_measure",
    "model_spec",
    "moments",
    "normalize_model",
    "oriented_ct",
    "oriented_limit",
    "oriented_table",
    "oriented_totals",
    "poisson_arms",
    "negative_binomial_arms",
    "reference_trajectory",
    "rhs_oriented",
    "rhs_symmetric",
    "series_moments",
    "simulate",
    "size_marginal",
    "smoluchowski_reference",
    "solve_h",
    "symmetric_arm_moment",
    "symmetric_ct",
    "symmetric_limit",
    "symmetric_second_factorial",
    "symmetric_table",
    "transport_residual",
    "weak_residual",
]
