"""Heavy-tail birth-death-mutation-competition particle simulations and
their fractional scaling limits: a nonlocal reaction-diffusion equation for
allometric exponents below one, a measure-valued superprocess at one."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    Bounds,
    BinaryRate,
    CustomKernel,
    ModelParams,
    ParetoKernel,
    PointMeasure,
    TestFunction,
    TruncatedParetoKernel,
    UnaryRate,
    constant_one,
    convolve_at,
    default_dictionary,
    gaussian_bump,
    integrate,
    make_kernel,
    sample_mutation_step,
    sigma_coefficient,
    sinusoid,
    tail_function,
    test_distance,
    validate_assumptions,
)
from .fractional import (  # noqa: F401
    DEFAULT_QUADRATURE,
    QuadratureSpec,
    c_alpha,
    cutoff_test_function,
    frac_laplacian_grid,
    frac_laplacian_point,
    kernel_limit_error,
    mass_control_bound_check,
    mass_control_value,
    scaled_generator_point,
)
from .pde import GridFunction, PdeRun, rhs, solve, weak_form_residual  # noqa: F401
from .simulator import (  # noqa: F401
    EnsembleStats,
    MartingalePath,
    SimState,
    Trajectory,
    ensemble_run,
    event_rates,
    martingale_path,
    run,
    step,
)
from .sde import (  # noqa: F401
    JumpSchemeSpec,
    SdePath,
    generator_point,
    large_jump_integral,
    mild_residual,
    semigroup_estimate,
    simulate_path,
    terminal_values,
)
from .harness import (  # noqa: F401
    ConvergeConfig,
    EscapeConfig,
    MomentConfig,
    QvConfig,
    converge_deterministic,
    mass_escape_check,
    moment_bound_check,
    superprocess_qv,
)
