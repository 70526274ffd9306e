"""Synthetic assignment streams and the experiments built on them.

Random numbers come from numpy's PCG64 bit generator seeded with an explicit
64-bit integer. Draw order is days (outer), then classes in config order,
then the cases of that (day, class), which are drawn in a single multinomial
call. Replication seeds are derived with :func:`derive_seed`, so an
experiment gives the same answer whether it runs serially or in parallel.
"""

from __future__ import annotations

import datetime as dt
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import mpmath
import numpy as np

from .estimation import (
    EstimationError,
    FitResult,
    fit_mle,
    lrt,
    parameter_ci,
)
from .ingest import (
    AggregateTable,
    AssignmentEvent,
    AvailabilityCalendar,
    SeedCounts,
    Unavailability,
    build_sample,
    running_proportions,
)
from .model import (
    PROPORTION,
    Cell,
    CourtConfig,
    ModelError,
    ModelSpec,
    ParameterVector,
    SampleUnit,
    Scenario,
    assignment_probabilities,
)

RULES = ("uniform_available", "proportion_penalized", "fixed_bias", "true_model")
THREADS_ENV = "CASEAUDIT_THREADS"


class SimulationError(ValueError):
    pass


def derive_seed(seed: int, *keys: int) -> int:
    """Child seed for ``keys`` (e.g. size index, replication index)."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *[int(k) for k in keys]])
    return int(ss.generate_state(1, np.uint64)[0])


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & (2**64 - 1)))


def rotating_calendar(
    config: CourtConfig, n_days: int, period: int, start: dt.date
) -> AvailabilityCalendar:
    """Exactly one non-reference chair unavailable at a time, handing over
    every ``period`` days in chair order."""
    if period < 1:
        raise SimulationError("rotation period must be >= 1")
    chairs = [j for j in range(1, config.n_chairs + 1) if j != config.reference_chair]
    spans = []
    for k, first in enumerate(range(0, n_days, period)):
        last = min(first + period, n_days) - 1
        spans.append(
            Unavailability(
                chairs[k % len(chairs)],
                start + dt.timedelta(days=first),
                start + dt.timedelta(days=last),
                "rotation",
            )
        )
    return AvailabilityCalendar(tuple(spans))


@dataclass(frozen=True)
class GeneratorSpec:
    """How a synthetic stream is produced.

    ``intensities`` are daily arrivals per class (fixed counts unless
    ``poisson``); a scalar applies to every class. ``availability`` is
    ``"all"``, ``"rotating"`` (see :func:`rotating_calendar`) or an explicit
    :class:`AvailabilityCalendar`.
    """

    rule: str = "uniform_available"
    n_days: int = 10
    intensities: float | tuple[float, ...] = 10.0
    gamma: float = 0.0
    weights: tuple[float, ...] | None = None
    true_spec: str | None = None
    true_params: tuple[float, ...] | None = None
    availability: str | AvailabilityCalendar = "all"
    rotation_period: int = 30
    seed_counts: SeedCounts | None = None
    poisson: bool = False
    start_date: dt.date = dt.date(2008, 2, 28)
    seed: int = 0

    def __post_init__(self):
        if self.rule not in RULES:
            raise SimulationError(f"unknown rule {self.rule!r}; choose from {', '.join(RULES)}")
        if self.n_days < 0:
            raise SimulationError("n_days must be >= 0")
        ints = np.atleast_1d(np.asarray(self.intensities, float))
        if (ints < 0).any() or not np.isfinite(ints).all():
            raise SimulationError("intensities must be finite and >= 0")
        if self.rule == "fixed_bias":
            if self.weights is None:
                raise SimulationError("fixed_bias needs weights")
            w = np.asarray(self.weights, float)
            if (w < 0).any() or not np.isfinite(w).all() or w.sum() <= 0:
                raise SimulationError("weights must be finite, >= 0, and not all zero")
        if self.rule == "true_model" and (self.true_spec is None or self.true_params is None):
            raise SimulationError("true_model needs true_spec and true_params")
        if isinstance(self.availability, str) and self.availability not in ("all", "rotating"):
            raise SimulationError(f"unknown availability scenario {self.availability!r}")

    def class_intensities(self, config: CourtConfig) -> np.ndarray:
        ints = np.atleast_1d(np.asarray(self.intensities, float))
        if ints.size == 1:
            return np.full(config.n_classes, ints[0])
        if ints.size != config.n_classes:
            raise SimulationError(f"need {config.n_classes} intensities, got {ints.size}")
        return ints

    def calendar(self, config: CourtConfig) -> AvailabilityCalendar:
        if isinstance(self.availability, AvailabilityCalendar):
            return self.availability
        if self.availability == "rotating":
            return rotating_calendar(config, self.n_days, self.rotation_period, self.start_date)
        return AvailabilityCalendar()


@dataclass
class SimulationResult:
    events: list[AssignmentEvent]
    truth: list[dict]
    calendar: AvailabilityCalendar
    seeds: SeedCounts
    counts: np.ndarray  # class x chair, the generator's own bookkeeping

    def table(self, config: CourtConfig) -> AggregateTable:
        return AggregateTable(config.class_labels, self.counts.copy())


def _draw_probabilities(
    gen: GeneratorSpec,
    config: CourtConfig,
    class_index: int,
    props: np.ndarray,
    avail: np.ndarray,
    true_params: ParameterVector | None,
) -> np.ndarray:
    if gen.rule == "uniform_available":
        w = avail.astype(float)
    elif gen.rule == "proportion_penalized":
        w = avail * np.exp(-gen.gamma * props)
    elif gen.rule == "fixed_bias":
        w = avail * np.asarray(gen.weights, float)
    else:
        cov = np.zeros((config.n_chairs, config.n_covariates))
        if PROPORTION in config.covariate_names:
            cov[:, config.covariate_names.index(PROPORTION)] = props
        return assignment_probabilities(
            true_params, Scenario(class_index, cov, avail), true_params.spec
        )
    if w.sum() <= 0:
        raise SimulationError("no available chair has positive weight")
    return w / w.sum()


def simulate_assignments(gen: GeneratorSpec, config: CourtConfig) -> SimulationResult:
    """Generate a reproducible event stream and its ground-truth log.

    Each truth record holds the exact probability vector used for one
    (day, class) draw together with the proportions and availability it was
    computed from.
    """
    if gen.weights is not None and len(gen.weights) != config.n_chairs:
        raise SimulationError(f"need {config.n_chairs} weights, got {len(gen.weights)}")
    true_params = None
    if gen.rule == "true_model":
        spec = ModelSpec(gen.true_spec, config)
        true_params = ParameterVector(spec, np.asarray(gen.true_params, float))
    rng = make_rng(gen.seed)
    calendar = gen.calendar(config)
    seeds = gen.seed_counts or SeedCounts()
    history = seeds.matrix(config).astype(np.int64)
    intensities = gen.class_intensities(config)
    counters = np.zeros((config.n_classes, config.n_chairs), dtype=np.int64)
    events: list[AssignmentEvent] = []
    truth: list[dict] = []
    n = config.n_chairs
    for d in range(gen.n_days):
        day = gen.start_date + dt.timedelta(days=d)
        avail = calendar.availability(day, n)
        today = np.zeros_like(counters)
        for ci, label in enumerate(config.class_labels):
            k = int(rng.poisson(intensities[ci])) if gen.poisson else int(round(intensities[ci]))
            if k == 0:
                continue
            if not avail.any():
                raise SimulationError(f"{day}: arrivals but no chair available")
            props = running_proportions(history[ci].astype(float))
            p = _draw_probabilities(gen, config, ci, props, avail, true_params)
            y = rng.multinomial(k, p)
            today[ci] = y
            truth.append(
                {
                    "day": day.isoformat(),
                    "class": label,
                    "n_cases": k,
                    "availability": [int(v) for v in avail],
                    "proportions": props.tolist(),
                    "probabilities": p.tolist(),
                }
            )
            events.extend(
                AssignmentEvent(day, label, j + 1, int(y[j])) for j in np.flatnonzero(y)
            )
        history += today
        counters += today
    return SimulationResult(events, truth, calendar, seeds, counters)


def simulate_sample(
    gen: GeneratorSpec, config: CourtConfig, n_units: int | None = None
) -> list[SampleUnit]:
    """Simulate and convert to sample units through the ingest path.

    With ``n_units`` the stream is made just long enough and truncated.
    """
    if n_units is not None:
        if n_units < 1:
            raise SimulationError("size must be >= 1")
        active = int((gen.class_intensities(config) > 0).sum())
        if active == 0:
            raise SimulationError("no class has arrivals")
        days = math.ceil(n_units / active) * (3 if gen.poisson else 1)
        gen = replace(gen, n_days=days)
    res = simulate_assignments(gen, config)
    units = build_sample(res.events, config, res.calendar, res.seeds)
    if n_units is not None:
        if len(units) < n_units:
            raise SimulationError(f"stream produced {len(units)} units, wanted {n_units}")
        units = units[:n_units]
    return units


# ---------------------------------------------------------------------------
# Brute-force oracle


def _oracle_eta(params: ParameterVector, class_index: int, cov: np.ndarray, chair: int):
    spec = params.spec
    cfg = spec.config
    if chair == cfg.reference_chair:
        return 0.0
    label = f"class:{cfg.class_labels[class_index]}"
    x = float(cov[chair - 1, cfg.covariate_names.index(PROPORTION)]) if spec.variant != "m5" else 0.0
    b, j = params, chair
    return {
        "m1": lambda: b[Cell(j, label)] + b[Cell(j, PROPORTION)] * x,
        "m2": lambda: b[Cell(None, label)] + b[Cell(j, PROPORTION)] * x,
        "m3": lambda: b[Cell(None, label)] + b[Cell(None, PROPORTION)] * x,
        "m4": lambda: b[Cell(j, "intercept")] + b[Cell(j, PROPORTION)] * x,
        "m5": lambda: b[Cell(j, label)],
        "m6": lambda: b[Cell(None, "intercept")] + b[Cell(None, PROPORTION)] * x,
    }[spec.variant]()


def brute_force_loglik(
    params: ParameterVector, sample: Sequence[SampleUnit], spec: ModelSpec, dps: int = 40
) -> float:
    """Log-likelihood by direct, unshifted softmax in ``dps``-digit arithmetic.

    Linear predictors are written out per variant, independent of the design
    matrices used by the fast path. Only meant for small instances.
    """
    if params.spec.variant != spec.variant or params.spec.config != spec.config:
        raise ModelError("parameters belong to a different spec")
    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for u in sample:
            etas = {}
            for j in range(1, spec.config.n_chairs + 1):
                if not u.availability[j - 1]:
                    if u.counts[j - 1]:
                        raise ModelError(f"{u.day}: count on unavailable chair {j}")
                    continue
                eta = _oracle_eta(params, u.class_index, u.covariates, j)
                if abs(eta) > 700:
                    raise OverflowError("brute-force oracle only covers |eta| <= 700")
                etas[j] = mpmath.exp(mpmath.mpf(eta))
            denom = mpmath.fsum(etas.values())
            for j, e in etas.items():
                y = int(u.counts[j - 1])
                if y:
                    total += y * mpmath.log(e / denom)
        return float(total)


# ---------------------------------------------------------------------------
# Experiments


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


@dataclass
class SizeSummary:
    size: int
    n_ok: int
    n_failed: int
    bias: list[float]
    rmse: list[float]
    coverage: list[float]
    estimates: list[list[float]] = field(repr=False)
    errors: list[str] = field(default_factory=list)


@dataclass
class RecoveryReport:
    true_spec: str
    true_params: list[float]
    cell_names: list[str]
    level: float
    replications: int
    sizes: list[SizeSummary]

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def _recovery_one(job):
    gen, config, variant, truth, size, level = job
    spec = ModelSpec(variant, config)
    try:
        units = simulate_sample(gen, config, n_units=size)
        fit = fit_mle(units, spec)
        if not fit.converged:
            return None, f"not converged: {fit.message}"
        ci = parameter_ci(fit, level)
        covered = (ci[:, 0] <= truth) & (truth <= ci[:, 1])
        return (fit.estimates.values.tolist(), covered.tolist()), None
    except (EstimationError, ModelError, SimulationError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def recovery_experiment(
    true_spec: ModelSpec,
    true_params: Sequence[float],
    generator: GeneratorSpec,
    sizes: Sequence[int],
    replications: int,
    seed: int,
    level: float = 0.95,
    workers: int | None = None,
) -> RecoveryReport:
    """Fit ``true_spec`` to data simulated from it and summarise accuracy.

    ``generator`` supplies everything but the rule, truth and seed; replicate
    ``r`` of size index ``a`` uses seed ``derive_seed(seed, a, r)``. Failed
    replications are recorded and skipped.
    """
    if replications < 1:
        raise SimulationError("replications must be >= 1")
    if not sizes or min(sizes) < 1:
        raise SimulationError("every size must be >= 1")
    truth = np.asarray(true_params, float)
    base = replace(
        generator, rule="true_model", true_spec=true_spec.variant, true_params=tuple(truth.tolist())
    )
    summaries = []
    for a, size in enumerate(sizes):
        jobs = [
            (replace(base, seed=derive_seed(seed, a, r)), true_spec.config, true_spec.variant, truth, size, level)
            for r in range(replications)
        ]
        results = _map(_recovery_one, jobs, workers or default_workers())
        ok = [r for r, err in results if r is not None]
        errors = [err for r, err in results if err is not None]
        if ok:
            est = np.array([r[0] for r in ok])
            cov = np.array([r[1] for r in ok], dtype=float)
            bias = (est.mean(axis=0) - truth).tolist()
            rmse = np.sqrt(((est - truth) ** 2).mean(axis=0)).tolist()
            coverage = cov.mean(axis=0).tolist()
        else:
            est = np.zeros((0, truth.size))
            bias = rmse = coverage = [float("nan")] * truth.size
        summaries.append(SizeSummary(size, len(ok), len(errors), bias, rmse, coverage, est.tolist(), errors))
    return RecoveryReport(
        true_spec.variant, truth.tolist(), true_spec.cell_names(), level, replications, summaries
    )


@dataclass
class CalibrationReport:
    null_spec: str
    alt_spec: str
    alpha: float
    replications: int
    rejection_rate: float
    p_values: list[float]
    errors: list[str]

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def _calibration_one(job):
    gen, config, null_v, alt_v, n_units = job
    try:
        units = simulate_sample(gen, config, n_units=n_units)
        full = fit_mle(units, ModelSpec(alt_v, config))
        reduced = fit_mle(units, ModelSpec(null_v, config))
        if not (full.converged and reduced.converged):
            return None, "not converged"
        return lrt(full, reduced).p_value, None
    except (EstimationError, ModelError, SimulationError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def lrt_calibration(
    null_spec: ModelSpec,
    alt_spec: ModelSpec,
    generator: GeneratorSpec,
    replications: int,
    alpha: float = 0.05,
    seed: int = 0,
    n_units: int | None = None,
    workers: int | None = None,
) -> CalibrationReport:
    """Empirical rejection rate of the LRT of ``null_spec`` against
    ``alt_spec`` on streams from ``generator``.

    When the generator satisfies the null this estimates the test's size,
    otherwise its power. Replicate ``r`` uses ``derive_seed(seed, r)``.
    """
    if replications < 1:
        raise SimulationError("replications must be >= 1")
    if not null_spec.nested_in(alt_spec):
        raise EstimationError(f"{null_spec.variant} is not nested in {alt_spec.variant}")
    jobs = [
        (replace(generator, seed=derive_seed(seed, r)), null_spec.config, null_spec.variant, alt_spec.variant, n_units)
        for r in range(replications)
    ]
    results = _map(_calibration_one, jobs, workers or default_workers())
    pvals = [p for p, err in results if p is not None]
    errors = [err for p, err in results if err is not None]
    rate = float(np.mean([p < alpha for p in pvals])) if pvals else float("nan")
    return CalibrationReport(null_spec.variant, alt_spec.variant, alpha, replications, rate, pvals, errors)


def random_seed_counts(
    config: CourtConfig, total: int, concentration: float, seed: int
) -> SeedCounts:
    """Pre-window history: per class, ``total`` cases split across chairs by
    Dirichlet(``concentration``) shares. Small concentrations give unbalanced
    histories, which keep running proportions spread out."""
    rng = make_rng(seed)
    counts = {}
    for label in config.class_labels:
        shares = rng.dirichlet(np.full(config.n_chairs, concentration))
        alloc = rng.multinomial(total, shares)
        for j, k in enumerate(alloc, start=1):
            if k:
                counts[(label, j)] = int(k)
    return SeedCounts(counts)
