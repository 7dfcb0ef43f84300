"""Simulation and verification toolkit for path-dependent McKean-Vlasov dynamics."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    CoefficientModel,
    Constants,
    ParticleCloud,
    Sampler,
    Scenario,
    Segment,
    TimeGrid,
    build_model,
    build_sampler,
    constant_segment,
    segment_shift,
)
from .metrics import (  # noqa: E402
    PathNorm,
    coupled_pair_cost,
    empirical_wasserstein,
    fit_exponential_rate,
    path_norm,
    second_gamma_moment,
    sorted_1d_wasserstein,
)
from .noise import NoiseStream  # noqa: E402
from .engine import (  # noqa: E402
    BlowUpError,
    ConvergenceError,
    MeasureFlow,
    run_interacting,
    simulate_frozen,
    solve_mckean_vlasov_picard,
    step_frozen,
    step_interacting,
)
