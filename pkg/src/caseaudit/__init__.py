"""Statistical audit of sequential case-assignment processes.

Multinomial logit models with a structured availability mechanism, fitted by
maximum likelihood, compared by likelihood-ratio tests, and summarised as
Bonferroni-corrected intervals for assignment probabilities.
"""

__version__ = "0.1.0"

from .estimation import (  # noqa: E402
    CiTable,
    EstimationError,
    FitOptions,
    FitResult,
    LrtResult,
    chi_squared_sf,
    fit_mle,
    lrt,
    lrt_from_loglik,
    normal_quantile,
    observed_information,
    probability_ci,
)
from .ingest import (  # noqa: E402
    AssignmentEvent,
    AvailabilityCalendar,
    IngestError,
    SeedCounts,
    aggregate_table,
    build_sample,
    parse_calendar,
    parse_events,
    parse_seeds,
)
from .model import (  # noqa: E402
    VARIANTS,
    Cell,
    CourtConfig,
    ModelError,
    ModelSpec,
    ParameterVector,
    SampleUnit,
    Scenario,
    assignment_probabilities,
    linear_predictor,
    log_likelihood,
    param_count,
    score,
)
from .simulate import (  # noqa: E402
    GeneratorSpec,
    brute_force_loglik,
    lrt_calibration,
    recovery_experiment,
    simulate_assignments,
)
