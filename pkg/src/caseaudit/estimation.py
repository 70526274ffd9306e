"""Maximum-likelihood fitting, Wald intervals and likelihood-ratio tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize, special

from .model import (
    Cell,
    Circumstances,
    Compiled,
    CourtConfig,
    ModelError,
    ModelSpec,
    ParameterVector,
    SampleUnit,
    assignment_probabilities,
    compile_sample,
    compiled_information,
    compiled_log_likelihood,
    compiled_probabilities,
    compiled_score,
)

log = logging.getLogger(__name__)

FIT_SCHEMA = "caseaudit.fit/1"
LRT_SCHEMA = "caseaudit.lrt/1"


class EstimationError(RuntimeError):
    """A fit or test could not be carried out."""


class InestimableError(EstimationError):
    """Some coefficient has no data informing it."""


class SingularInformationError(EstimationError):
    """Observed information cannot be inverted: the fit is not identifiable."""


# ---------------------------------------------------------------------------
# Distribution helpers


def chi_squared_sf(x: float, df: int) -> float:
    """Upper tail of the chi-squared distribution (regularised upper
    incomplete gamma ``Q(df/2, x/2)``)."""
    if x < 0 or df < 1:
        raise ValueError(f"need x >= 0 and df >= 1, got x={x}, df={df}")
    return float(special.gammaincc(df / 2.0, x / 2.0))


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    return float(special.ndtri(p))


# ---------------------------------------------------------------------------
# Fitting


@dataclass(frozen=True)
class FitOptions:
    """Optimiser settings.

    Iteration stops when the gradient max-norm drops below ``gtol`` or the
    log-likelihood changes by less than ``ftol`` (relative to
    ``max(1, |ll|)``) between Newton steps. A coefficient larger than
    ``separation_bound`` in magnitude, or an available chair whose total
    expected count falls below ``separation_count``, marks the fit as
    quasi-separated: the likelihood keeps rising towards a boundary and a
    small gradient there does not mean a finite maximum exists.
    """

    gtol: float = 1e-8
    ftol: float = 1e-12
    max_iter: int = 500
    separation_bound: float = 30.0
    separation_count: float = 1e-6
    start: tuple[float, ...] | None = None


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: ModelSpec
    estimates: ParameterVector
    log_likelihood_at_max: float
    observed_information: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    separated: bool = False
    n_units: int = 0
    n_cases: int = 0
    message: str = ""

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def covariance(self) -> np.ndarray:
        return _invert_information(self.observed_information)

    def to_dict(self) -> dict:
        return {
            "schema": FIT_SCHEMA,
            "spec": self.spec.variant,
            "config": self.spec.config.to_dict(),
            "cells": self.spec.cell_names(),
            "estimates": self.estimates.values.tolist(),
            "log_likelihood_at_max": self.log_likelihood_at_max,
            "observed_information": self.observed_information.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "separated": self.separated,
            "n_units": self.n_units,
            "n_cases": self.n_cases,
            "message": self.message,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        if d.get("schema") != FIT_SCHEMA:
            raise EstimationError(f"not a fit result (schema {d.get('schema')!r})")
        spec = ModelSpec(d["spec"], CourtConfig.from_dict(d["config"]))
        if spec.cell_names() != list(d["cells"]):
            raise EstimationError("cell layout in file does not match the spec")
        return cls(
            spec=spec,
            estimates=ParameterVector(spec, np.array(d["estimates"], float)),
            log_likelihood_at_max=float(d["log_likelihood_at_max"]),
            observed_information=np.array(d["observed_information"], float).reshape(
                spec.n_params, spec.n_params
            ),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            final_gradient_norm=float(d["final_gradient_norm"]),
            separated=bool(d.get("separated", False)),
            n_units=int(d.get("n_units", 0)),
            n_cases=int(d.get("n_cases", 0)),
            message=d.get("message", ""),
        )


def check_estimable(compiled: Compiled) -> None:
    """Raise if some coefficient is never active on an available chair.

    A cell is exposed when its design column is non-zero for at least one
    available chair in at least one unit with cases.
    """
    spec = compiled.spec
    active = (compiled.design != 0) & compiled.available[:, :, None]
    exposed = active.any(axis=(0, 1))
    missing = [spec.cells[i].name for i in np.flatnonzero(~exposed)]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise InestimableError(f"{spec.variant}: no exposure for cell(s) {shown}")


def _gnorm(grad: np.ndarray) -> float:
    return float(np.abs(grad).max()) if grad.size else 0.0


@dataclass
class _State:
    beta: np.ndarray
    ll: float
    grad: np.ndarray
    iterations: int = 0
    converged: bool = False
    separated: bool = False
    message: str = ""


def _newton(beta: np.ndarray, c: Compiled, opts: FitOptions) -> tuple[_State, bool]:
    """Damped Newton ascent. Second item is True if the Hessian solve failed."""
    st = _State(beta, compiled_log_likelihood(beta, c), compiled_score(beta, c))
    while st.iterations < opts.max_iter:
        if _gnorm(st.grad) < opts.gtol:
            st.converged = True
            return st, False
        try:
            chol = np.linalg.cholesky(compiled_information(st.beta, c))
            step = np.linalg.solve(chol.T, np.linalg.solve(chol, st.grad))
        except np.linalg.LinAlgError:
            return st, True
        t = 1.0
        while True:
            cand = st.beta + t * step
            cand_ll = compiled_log_likelihood(cand, c)
            if np.isfinite(cand_ll) and cand_ll >= st.ll - 1e-12 * max(1.0, abs(st.ll)):
                break
            t *= 0.5
            if t < 1e-12:
                raise EstimationError("line search found no finite ascent step")
        change = cand_ll - st.ll
        st.beta, st.ll, st.grad = cand, cand_ll, compiled_score(cand, c)
        st.iterations += 1
        if np.abs(st.beta).max(initial=0.0) > opts.separation_bound:
            st.separated = True
            st.message = "quasi-separation: a coefficient exceeded the bound"
            return st, False
        if abs(change) < opts.ftol * max(1.0, abs(st.ll)):
            st.converged = True
            st.message = "log-likelihood change below ftol"
            return st, False
    st.converged = _gnorm(st.grad) < opts.gtol
    return st, False


def _quasi_newton(st: _State, c: Compiled, opts: FitOptions) -> _State:
    res = optimize.minimize(
        lambda b: -compiled_log_likelihood(b, c),
        st.beta,
        jac=lambda b: -compiled_score(b, c),
        method="BFGS",
        options={"gtol": opts.gtol, "maxiter": max(1, opts.max_iter - st.iterations)},
    )
    out = _State(res.x, compiled_log_likelihood(res.x, c), compiled_score(res.x, c))
    out.iterations = st.iterations + int(res.nit)
    out.separated = bool(np.abs(res.x).max(initial=0.0) > opts.separation_bound)
    out.converged = _gnorm(out.grad) < opts.gtol and not out.separated
    out.message = "quasi-Newton fallback: " + str(res.message)
    if out.separated:
        out.message += "; quasi-separation: a coefficient exceeded the bound"
    return out


def fit_compiled(c: Compiled, options: FitOptions | None = None) -> FitResult:
    opts = options or FitOptions()
    spec = c.spec
    if c.n_units == 0:
        raise EstimationError("cannot fit an empty sample")
    check_estimable(c)
    beta0 = np.zeros(spec.n_params) if opts.start is None else np.array(opts.start, float)
    st, hessian_failed = _newton(beta0, c, opts)
    if hessian_failed:
        log.info("%s: Newton solve failed, switching to BFGS", spec.variant)
        st = _quasi_newton(st, c, opts)
    if not st.separated:
        expected = (c.totals[:, None] * compiled_probabilities(st.beta, c)).sum(axis=0)
        offered = c.available.any(axis=0)
        if (expected[offered] < opts.separation_count).any():
            st.separated = True
            st.converged = False
            st.message = "quasi-separation: an available chair has ~0 expected cases"
    if st.separated:
        log.info("%s: fit is quasi-separated; estimates are not reliable", spec.variant)
    elif not st.converged:
        st.message = st.message or f"no convergence after {st.iterations} iterations"
    return FitResult(
        spec=spec,
        estimates=ParameterVector(spec, st.beta),
        log_likelihood_at_max=st.ll,
        observed_information=compiled_information(st.beta, c),
        converged=st.converged,
        iterations=st.iterations,
        final_gradient_norm=_gnorm(st.grad),
        separated=st.separated,
        n_units=c.n_units,
        n_cases=int(c.totals.sum()),
        message=st.message,
    )


def fit_mle(
    sample: Sequence[SampleUnit], spec: ModelSpec, options: FitOptions | None = None
) -> FitResult:
    """Maximise the log-likelihood of ``spec`` on ``sample``.

    Newton-Raphson from the all-zero (uniform) start with step halving; BFGS
    takes over if the information matrix cannot be factorised. The result is
    deterministic for a given sample, spec and options.

    Raises
    ------
    InestimableError
        If some coefficient has no exposure in the sample.
    """
    return fit_compiled(compile_sample(sample, spec), options)


def _invert_information(info: np.ndarray) -> np.ndarray:
    info = np.asarray(info, float)
    if info.size == 0:
        return info.copy()
    try:
        chol = np.linalg.cholesky(info)
    except np.linalg.LinAlgError:
        raise SingularInformationError(
            "observed information is not positive definite; the fit is not identifiable"
        ) from None
    if np.diag(chol).min() <= 1e-10 * np.diag(chol).max():
        raise SingularInformationError("observed information is numerically singular")
    inv_l = np.linalg.inv(chol)
    return inv_l.T @ inv_l


def observed_information(
    estimates: ParameterVector, sample: Sequence[SampleUnit]
) -> np.ndarray:
    """Analytic negative Hessian at ``estimates``.

    Raises :class:`SingularInformationError` if the matrix is singular.
    """
    info = compiled_information(estimates.values, compile_sample(sample, estimates.spec))
    _invert_information(info)
    return info


# ---------------------------------------------------------------------------
# Probability intervals


@dataclass(frozen=True)
class CiRow:
    chair: int
    available: bool
    point: float
    lower: float
    upper: float
    std_error: float


@dataclass(frozen=True)
class CiTable:
    class_label: str
    proportions: tuple[float, ...]
    availability: tuple[bool, ...]
    confidence_level: float
    family_size: int
    z: float
    rows: tuple[CiRow, ...]

    @property
    def points(self) -> np.ndarray:
        return np.array([r.point for r in self.rows])

    @property
    def lower(self) -> np.ndarray:
        return np.array([r.lower for r in self.rows])

    @property
    def upper(self) -> np.ndarray:
        return np.array([r.upper for r in self.rows])


def probability_gradients(params: ParameterVector, scenario: Circumstances) -> np.ndarray:
    """Jacobian of the chair probabilities w.r.t. the coefficients,
    shape ``(n_chairs, n_params)``."""
    spec = params.spec
    prob = assignment_probabilities(params, scenario, spec)
    d = spec.design(scenario.class_index, scenario.covariates)
    return prob[:, None] * (d - prob @ d)


def probability_ci(
    fit: FitResult,
    scenario: Circumstances,
    level: float = 0.99,
    family_size: int | None = None,
) -> CiTable:
    """Delta-method Wald intervals for the chair probabilities of a scenario.

    Each interval is built at level ``1 - (1 - level) / family_size``
    (Bonferroni). ``family_size`` defaults to the number of available chairs.
    Bounds are clipped to [0, 1]; unavailable chairs get ``[0, 0]``.
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    if not fit.converged:
        raise EstimationError("confidence intervals need a converged fit")
    avail = np.asarray(scenario.availability, bool)
    if family_size is None:
        family_size = int(avail.sum())
    if family_size < 1:
        raise ValueError("family_size must be at least 1")
    cov = fit.covariance()
    params = fit.estimates
    prob = assignment_probabilities(params, scenario, fit.spec)
    jac = probability_gradients(params, scenario)
    var = np.einsum("jp,pq,jq->j", jac, cov, jac)
    se = np.sqrt(np.clip(var, 0.0, None))
    z = normal_quantile(1.0 - (1.0 - level) / family_size / 2.0)
    rows = []
    for j in range(fit.spec.config.n_chairs):
        if not avail[j]:
            rows.append(CiRow(j + 1, False, 0.0, 0.0, 0.0, 0.0))
            continue
        lo = min(max(prob[j] - z * se[j], 0.0), prob[j])
        hi = max(min(prob[j] + z * se[j], 1.0), prob[j])
        rows.append(CiRow(j + 1, True, float(prob[j]), float(lo), float(hi), float(se[j])))
    cfg = fit.spec.config
    prop_col = cfg.covariate_names.index("proportion") if "proportion" in cfg.covariate_names else None
    cov_arr = np.asarray(scenario.covariates, float).reshape(cfg.n_chairs, -1)
    props = tuple(cov_arr[:, prop_col].tolist()) if prop_col is not None else ()
    return CiTable(
        class_label=cfg.class_labels[scenario.class_index],
        proportions=props,
        availability=tuple(avail.tolist()),
        confidence_level=level,
        family_size=family_size,
        z=z,
        rows=tuple(rows),
    )


def parameter_ci(fit: FitResult, level: float = 0.95) -> np.ndarray:
    """Per-coefficient Wald intervals, shape ``(n_params, 2)``."""
    se = np.sqrt(np.diag(fit.covariance()))
    z = normal_quantile(0.5 + level / 2.0)
    est = fit.estimates.values
    return np.column_stack([est - z * se, est + z * se])


# ---------------------------------------------------------------------------
# Likelihood-ratio tests

HYPOTHESES = {
    "m1": "-",
    "m2": "The effect of class is the same on all chambers",
    "m3": "The effect of class and proportion is the same on all chambers",
    "m4": "There is no effect of class",
    "m5": "There is no effect of proportion",
    "m6": "There is no effect of class and the effect of proportion is the same on all chambers",
}


@dataclass(frozen=True)
class LrtResult:
    chi_squared: float
    df: int
    p_value: float
    full_spec: str
    reduced_spec: str
    ll_full: float
    ll_reduced: float

    def to_dict(self) -> dict:
        return {
            "schema": LRT_SCHEMA,
            "chi_squared": self.chi_squared,
            "df": self.df,
            "p_value": self.p_value,
            "full_spec": self.full_spec,
            "reduced_spec": self.reduced_spec,
            "ll_full": self.ll_full,
            "ll_reduced": self.ll_reduced,
        }


def lrt_from_loglik(
    ll_full: float,
    ll_reduced: float,
    k_full: int,
    k_reduced: int,
    full_spec: str = "",
    reduced_spec: str = "",
    rtol: float = 1e-9,
) -> LrtResult:
    """Likelihood-ratio test from two maximised log-likelihoods.

    A reduced model beating the full one by more than ``rtol`` (relative)
    means one of the fits did not reach its optimum.
    """
    df = k_full - k_reduced
    if df < 0:
        raise EstimationError(f"reduced model has more parameters ({k_reduced} > {k_full})")
    diff = ll_full - ll_reduced
    if diff < 0:
        if -diff > rtol * max(1.0, abs(ll_full)):
            raise EstimationError(
                f"reduced log-likelihood {ll_reduced} exceeds full {ll_full}: a fit failed"
            )
        diff = 0.0
    stat = 2.0 * diff
    p = 1.0 if df == 0 or stat == 0.0 else chi_squared_sf(stat, df)
    return LrtResult(stat, df, p, full_spec, reduced_spec, ll_full, ll_reduced)


def lrt(full: FitResult, reduced: FitResult) -> LrtResult:
    """Likelihood-ratio test of ``reduced`` against ``full`` (same sample)."""
    if not reduced.spec.nested_in(full.spec):
        raise EstimationError(
            f"{reduced.spec.variant} is not nested in {full.spec.variant}"
        )
    if (full.n_units, full.n_cases) != (reduced.n_units, reduced.n_cases):
        raise EstimationError("fits were made on different samples")
    return lrt_from_loglik(
        full.log_likelihood_at_max,
        reduced.log_likelihood_at_max,
        full.n_params,
        reduced.n_params,
        full.spec.variant,
        reduced.spec.variant,
    )


def refit_with_reference(
    sample: Sequence[SampleUnit], fit: FitResult, chair: int, options: FitOptions | None = None
) -> FitResult:
    """Fit the same variant with a different reference chair."""
    spec = ModelSpec(fit.spec.variant, fit.spec.config.with_reference(chair))
    return fit_mle(sample, spec, options)


__all__ = [
    "Cell",
    "CiRow",
    "CiTable",
    "EstimationError",
    "FitOptions",
    "FitResult",
    "HYPOTHESES",
    "InestimableError",
    "LrtResult",
    "ModelError",
    "SingularInformationError",
    "check_estimable",
    "chi_squared_sf",
    "fit_compiled",
    "fit_mle",
    "lrt",
    "lrt_from_loglik",
    "normal_quantile",
    "observed_information",
    "parameter_ci",
    "probability_ci",
    "probability_gradients",
    "refit_with_reference",
]
