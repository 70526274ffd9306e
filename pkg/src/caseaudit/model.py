"""Multinomial logit with a structured availability (missing-data) mechanism.

A court has ``n`` chairs. Each sample unit is one (day, class) multinomial
draw: ``counts[j]`` cases went to chair ``j``, ``availability[j]`` says
whether chair ``j`` could receive cases at all, and ``covariates[j]`` holds
the per-chair circumstances (by default only the running proportion of the
class already assigned to the chair).

For an available chair the log-odds against the reference chair is linear in
the covariates; an unavailable chair has probability exactly zero. The six
built-in parameterisations (``m1`` .. ``m6``) differ only in which
coefficients exist and which are shared across chairs.

Chairs are numbered from 1 in every user-facing structure (configs, cell
names, CSV files). Arrays are indexed from 0, so chair ``j`` lives at
position ``j - 1``.
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Protocol, Sequence

import numpy as np

VARIANTS = ("m1", "m2", "m3", "m4", "m5", "m6")

PROPORTION = "proportion"

# reduced -> set of specs it is a linear restriction of (reflexive)
_NESTED_IN = {
    "m1": {"m1"},
    "m2": {"m1", "m2"},
    "m3": {"m1", "m2", "m3"},
    "m4": {"m1", "m4"},
    "m5": {"m1", "m5"},
    "m6": {"m1", "m2", "m3", "m4", "m6"},
}


class ModelError(ValueError):
    """Invalid model input: bad layout, bad unit, or inconsistent data."""


@dataclass(frozen=True)
class CourtConfig:
    """Static description of the court.

    Parameters
    ----------
    n_chairs : int
        Number of chairs.
    class_labels : tuple of str
        Ordered case-class identifiers. The order fixes class indices.
    reference_chair : int
        1-based chair whose coefficients are pinned at zero.
    covariate_names : tuple of str
        Names of the per-chair covariate columns of every sample unit.
    """

    n_chairs: int
    class_labels: tuple[str, ...]
    reference_chair: int = 1
    covariate_names: tuple[str, ...] = (PROPORTION,)

    def __post_init__(self):
        object.__setattr__(self, "class_labels", tuple(self.class_labels))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if self.n_chairs < 2:
            raise ModelError(f"need at least 2 chairs, got {self.n_chairs}")
        if not 1 <= self.reference_chair <= self.n_chairs:
            raise ModelError(
                f"reference chair {self.reference_chair} outside 1..{self.n_chairs}"
            )
        if not self.class_labels:
            raise ModelError("class_labels is empty")
        if len(set(self.class_labels)) != len(self.class_labels):
            raise ModelError("class_labels are not unique")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise ModelError("covariate_names are not unique")

    @property
    def n_classes(self) -> int:
        return len(self.class_labels)

    @property
    def n_covariates(self) -> int:
        return len(self.covariate_names)

    def class_index(self, label: str) -> int:
        try:
            return self.class_labels.index(label)
        except ValueError:
            raise ModelError(f"unknown class label {label!r}") from None

    def with_reference(self, chair: int) -> "CourtConfig":
        return CourtConfig(self.n_chairs, self.class_labels, chair, self.covariate_names)

    def to_dict(self) -> dict:
        return {
            "n_chairs": self.n_chairs,
            "class_labels": list(self.class_labels),
            "reference_chair": self.reference_chair,
            "covariate_names": list(self.covariate_names),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CourtConfig":
        return cls(
            n_chairs=int(d["n_chairs"]),
            class_labels=tuple(d["class_labels"]),
            reference_chair=int(d.get("reference_chair", 1)),
            covariate_names=tuple(d.get("covariate_names", (PROPORTION,))),
        )


class Circumstances(Protocol):
    """Anything carrying the inputs of a prediction: a unit or a scenario."""

    class_index: int
    availability: np.ndarray
    covariates: np.ndarray


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Scenario:
    """Circumstances of a new case: class, per-chair covariates, availability."""

    class_index: int
    covariates: np.ndarray
    availability: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "covariates", _frozen(self.covariates, float))
        object.__setattr__(self, "availability", _frozen(self.availability, bool))
        if self.covariates.ndim == 1:
            object.__setattr__(self, "covariates", _frozen(self.covariates[:, None], float))
        if self.covariates.shape[0] != self.availability.shape[0]:
            raise ModelError("covariates and availability disagree on chair count")
        if not self.availability.any():
            raise ModelError("no chair is available")


@dataclass(frozen=True, eq=False)
class SampleUnit:
    """One (day, class) multinomial observation."""

    day: _dt.date
    class_index: int
    counts: np.ndarray
    availability: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "counts", _frozen(self.counts, np.int64))
        object.__setattr__(self, "availability", _frozen(self.availability, bool))
        cov = np.array(self.covariates, dtype=float)
        if cov.ndim == 1:
            cov = cov[:, None]
        object.__setattr__(self, "covariates", _frozen(cov, float))
        n = self.counts.shape[0]
        if self.availability.shape != (n,) or self.covariates.shape[0] != n:
            raise ModelError("counts, availability and covariates disagree on chair count")
        if (self.counts < 0).any():
            raise ModelError(f"negative counts on {self.day}")
        if not self.availability.any():
            raise ModelError(f"no chair available on {self.day}")
        bad = np.flatnonzero((self.counts > 0) & ~self.availability)
        if bad.size:
            raise ModelError(
                f"{self.day}: cases assigned to unavailable chair(s) {(bad + 1).tolist()}"
            )
        if self.counts.sum() < 1:
            raise ModelError(f"{self.day}: unit has no cases")
        if not np.isfinite(self.covariates).all():
            raise ModelError(f"{self.day}: non-finite covariates")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def check_unit(unit: SampleUnit, config: CourtConfig) -> None:
    """Validate a unit against a court configuration."""
    if unit.counts.shape[0] != config.n_chairs:
        raise ModelError(
            f"{unit.day}: unit has {unit.counts.shape[0]} chairs, config has {config.n_chairs}"
        )
    if not 0 <= unit.class_index < config.n_classes:
        raise ModelError(f"{unit.day}: class index {unit.class_index} out of range")
    if unit.covariates.shape[1] != config.n_covariates:
        raise ModelError(f"{unit.day}: expected {config.n_covariates} covariate columns")
    if PROPORTION in config.covariate_names:
        prop = unit.covariates[:, config.covariate_names.index(PROPORTION)]
        if (prop < -1e-12).any() or (prop > 1 + 1e-12).any():
            raise ModelError(f"{unit.day}: proportions outside [0, 1]")
        if abs(prop.sum() - 1.0) > 1e-9:
            raise ModelError(f"{unit.day}: proportions sum to {prop.sum()!r}, not 1")


class Cell(NamedTuple):
    """A coefficient slot. ``chair`` is None for coefficients shared by all
    non-reference chairs; ``slot`` is ``"intercept"``, ``"proportion"`` or
    ``"class:<label>"``."""

    chair: int | None
    slot: str

    @property
    def name(self) -> str:
        owner = "shared" if self.chair is None else f"chair{self.chair}"
        return f"{owner}/{self.slot}"

    @classmethod
    def parse(cls, name: str) -> "Cell":
        owner, slot = name.split("/", 1)
        return cls(None if owner == "shared" else int(owner[len("chair"):]), slot)


def param_count(variant: str, config: CourtConfig) -> int:
    """Number of free coefficients of a built-in parameterisation."""
    c, n = config.n_classes, config.n_chairs
    counts = {
        "m1": c * (n - 1) + (n - 1),
        "m2": c + (n - 1),
        "m3": c + 1,
        "m4": 2 * (n - 1),
        "m5": c * (n - 1),
        "m6": 2,
    }
    try:
        return counts[variant.lower()]
    except KeyError:
        raise ModelError(f"unsupported model variant {variant!r}") from None


@dataclass(frozen=True)
class ModelSpec:
    """A built-in parameterisation bound to a court configuration.

    Class effects are one-hot over all classes with no intercept (``m1``,
    ``m2``, ``m3``, ``m5``); ``m4`` and ``m6`` carry an explicit intercept.
    """

    variant: str
    config: CourtConfig

    def __post_init__(self):
        object.__setattr__(self, "variant", self.variant.lower())
        if self.variant not in VARIANTS:
            raise ModelError(f"unsupported model variant {self.variant!r}")
        if self.variant != "m5" and PROPORTION not in self.config.covariate_names:
            raise ModelError(f"{self.variant} needs a {PROPORTION!r} covariate")

    @property
    def non_reference_chairs(self) -> list[int]:
        return [j for j in range(1, self.config.n_chairs + 1) if j != self.config.reference_chair]

    @cached_property
    def cells(self) -> tuple[Cell, ...]:
        classes = [f"class:{c}" for c in self.config.class_labels]
        chairs = self.non_reference_chairs
        v = self.variant
        if v == "m1":
            out = [Cell(j, s) for j in chairs for s in classes + [PROPORTION]]
        elif v == "m2":
            out = [Cell(None, s) for s in classes] + [Cell(j, PROPORTION) for j in chairs]
        elif v == "m3":
            out = [Cell(None, s) for s in classes + [PROPORTION]]
        elif v == "m4":
            out = [Cell(j, s) for j in chairs for s in ("intercept", PROPORTION)]
        elif v == "m5":
            out = [Cell(j, s) for j in chairs for s in classes]
        else:
            out = [Cell(None, "intercept"), Cell(None, PROPORTION)]
        return tuple(out)

    @cached_property
    def _index(self) -> dict[Cell, int]:
        return {c: i for i, c in enumerate(self.cells)}

    @property
    def n_params(self) -> int:
        return len(self.cells)

    def index_of(self, cell: Cell) -> int:
        try:
            return self._index[cell]
        except KeyError:
            raise ModelError(f"{self.variant} has no cell {cell.name}") from None

    def cell_names(self) -> list[str]:
        return [c.name for c in self.cells]

    def nested_in(self, other: "ModelSpec") -> bool:
        """True if this spec is a linear restriction of ``other``."""
        return self.config == other.config and other.variant in _NESTED_IN[self.variant]

    def design(self, class_index: int, covariates: np.ndarray) -> np.ndarray:
        """Per-chair design rows, shape ``(n_chairs, n_params)``.

        Row ``j - 1`` maps the coefficient vector to chair ``j``'s linear
        predictor. The reference chair's row is zero.
        """
        n, p = self.config.n_chairs, self.n_params
        out = np.zeros((n, p))
        prop = None
        if PROPORTION in self.config.covariate_names:
            prop = np.asarray(covariates, float).reshape(n, -1)[
                :, self.config.covariate_names.index(PROPORTION)
            ]
        cls = f"class:{self.config.class_labels[class_index]}"
        idx = self._index
        for j in self.non_reference_chairs:
            row = out[j - 1]
            for cell in (Cell(j, cls), Cell(None, cls), Cell(j, "intercept"), Cell(None, "intercept")):
                i = idx.get(cell)
                if i is not None:
                    row[i] = 1.0
            for cell in (Cell(j, PROPORTION), Cell(None, PROPORTION)):
                i = idx.get(cell)
                if i is not None:
                    row[i] = prop[j - 1]
        return out


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat coefficient vector with its cell map. Reference-chair cells are
    implicit zeros and are not stored."""

    spec: ModelSpec
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        vals = np.zeros(self.spec.n_params) if self.values is None else self.values
        vals = _frozen(vals, float)
        if vals.shape != (self.spec.n_params,):
            raise ModelError(
                f"{self.spec.variant} needs {self.spec.n_params} values, got {vals.shape}"
            )
        if not np.isfinite(vals).all():
            raise ModelError("parameter values must be finite")
        object.__setattr__(self, "values", vals)

    def __getitem__(self, cell: Cell) -> float:
        if cell.chair == self.spec.config.reference_chair:
            return 0.0
        return float(self.values[self.spec.index_of(cell)])

    def replace(self, updates: dict[Cell, float]) -> "ParameterVector":
        vals = self.values.copy()
        for cell, v in updates.items():
            vals[self.spec.index_of(cell)] = v
        return ParameterVector(self.spec, vals)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.spec.cell_names(), self.values.tolist()))


# ---------------------------------------------------------------------------
# Compiled sample: dense tensors for fast likelihood evaluation


@dataclass(frozen=True, eq=False)
class Compiled:
    """A sample stacked into arrays for one spec.

    ``design`` has shape ``(m, n, p)``, ``counts`` and ``available``
    ``(m, n)``, ``totals`` ``(m,)``.
    """

    spec: ModelSpec
    design: np.ndarray
    counts: np.ndarray
    available: np.ndarray
    totals: np.ndarray

    @property
    def n_units(self) -> int:
        return self.counts.shape[0]


def compile_sample(sample: Sequence[SampleUnit], spec: ModelSpec) -> Compiled:
    n, p = spec.config.n_chairs, spec.n_params
    m = len(sample)
    design = np.zeros((m, n, p))
    counts = np.zeros((m, n))
    avail = np.zeros((m, n), dtype=bool)
    for s, u in enumerate(sample):
        if u.counts.shape[0] != n:
            raise ModelError(f"{u.day}: unit has {u.counts.shape[0]} chairs, spec has {n}")
        if ((u.counts > 0) & ~u.availability).any():
            raise ModelError(f"{u.day}: count on unavailable chair")
        design[s] = spec.design(u.class_index, u.covariates)
        counts[s] = u.counts
        avail[s] = u.availability
    return Compiled(spec, design, counts, avail, counts.sum(axis=1))


def _as_values(params, spec: ModelSpec) -> np.ndarray:
    if isinstance(params, ParameterVector):
        if params.spec.n_params != spec.n_params:
            raise ModelError("parameter vector does not match spec layout")
        return params.values
    vals = np.asarray(params, float)
    if vals.shape != (spec.n_params,):
        raise ModelError(f"expected {spec.n_params} parameters, got shape {vals.shape}")
    return vals


def _log_probs(eta: np.ndarray, available: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over available chairs; ``-inf`` elsewhere."""
    masked = np.where(available, eta, -np.inf)
    shift = masked.max(axis=-1, keepdims=True)
    z = np.exp(masked - shift)
    return masked - shift - np.log(z.sum(axis=-1, keepdims=True))


def compiled_log_likelihood(beta: np.ndarray, c: Compiled) -> float:
    if c.n_units == 0:
        return 0.0
    logp = _log_probs(c.design @ beta, c.available)
    # 0 * log 0 := 0; zero counts never touch -inf entries
    return float((c.counts * np.where(c.counts > 0, logp, 0.0)).sum())


def compiled_probabilities(beta: np.ndarray, c: Compiled) -> np.ndarray:
    if c.n_units == 0:
        return np.zeros((0, c.spec.config.n_chairs))
    return np.exp(_log_probs(c.design @ beta, c.available))


def compiled_score(beta: np.ndarray, c: Compiled) -> np.ndarray:
    if c.n_units == 0:
        return np.zeros(c.spec.n_params)
    resid = c.counts - c.totals[:, None] * compiled_probabilities(beta, c)
    return np.einsum("snp,sn->p", c.design, resid)


def compiled_information(beta: np.ndarray, c: Compiled) -> np.ndarray:
    """Negative Hessian: sum over units of N_s D_s' (diag p - p p') D_s."""
    p_dim = c.spec.n_params
    if c.n_units == 0:
        return np.zeros((p_dim, p_dim))
    prob = compiled_probabilities(beta, c)
    w = c.totals[:, None] * prob
    mean_row = np.einsum("sn,snp->sp", prob, c.design)
    info = np.einsum("snp,sn,snq->pq", c.design, w, c.design, optimize=True)
    info -= np.einsum("s,sp,sq->pq", c.totals, mean_row, mean_row, optimize=True)
    return 0.5 * (info + info.T)


# ---------------------------------------------------------------------------
# Public, unit-level API


def linear_predictor(params, unit: Circumstances, chair: int, spec: ModelSpec) -> float:
    """Linear predictor of a 1-based ``chair``; zero for the reference chair."""
    n = spec.config.n_chairs
    if not 1 <= chair <= n:
        raise ModelError(f"chair {chair} outside 1..{n}")
    if not unit.availability[chair - 1]:
        raise ModelError(f"chair {chair} is unavailable")
    beta = _as_values(params, spec)
    return float(spec.design(unit.class_index, unit.covariates)[chair - 1] @ beta)


def assignment_probabilities(params, unit: Circumstances, spec: ModelSpec) -> np.ndarray:
    """Probability that a new case goes to each chair.

    Exactly zero on unavailable chairs; a max-shifted softmax elsewhere.
    """
    avail = np.asarray(unit.availability, bool)
    if not avail.any():
        raise ModelError("all chairs unavailable")
    beta = _as_values(params, spec)
    eta = spec.design(unit.class_index, unit.covariates) @ beta
    return np.exp(_log_probs(eta, avail))


def log_likelihood(params, sample: Sequence[SampleUnit], spec: ModelSpec) -> float:
    """Log-likelihood kernel ``sum_s sum_j y_sj v_sj log p_sj``.

    Multinomial coefficients are omitted, so daily totals are conditioned on.
    """
    return compiled_log_likelihood(_as_values(params, spec), compile_sample(sample, spec))


def score(params, sample: Sequence[SampleUnit], spec: ModelSpec) -> np.ndarray:
    """Gradient of :func:`log_likelihood` with respect to every stored cell."""
    return compiled_score(_as_values(params, spec), compile_sample(sample, spec))


def information(params, sample: Sequence[SampleUnit], spec: ModelSpec) -> np.ndarray:
    """Negative Hessian of :func:`log_likelihood` (analytic)."""
    return compiled_information(_as_values(params, spec), compile_sample(sample, spec))
