import datetime as dt

import numpy as np
import pytest

from caseaudit.model import CourtConfig, ModelSpec, ParameterVector, SampleUnit

COURT_CLASSES = (
    "AC", "ACO", "ADI", "AI", "ARE", "HC", "Inq", "MI", "MS", "Pet", "RE", "RHC", "RMS", "Rcl",
)

# criterion -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0]), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {key}: {detail}")


@pytest.fixture
def court_config():
    return CourtConfig(11, COURT_CLASSES)


def random_units(rng, config: CourtConfig, m: int, max_count: int = 6):
    """Units with random availability, Dirichlet proportions and counts."""
    n = config.n_chairs
    units = []
    for s in range(m):
        avail = rng.random(n) < 0.8
        if not avail.any():
            avail[rng.integers(n)] = True
        props = rng.dirichlet(np.ones(n))
        counts = np.zeros(n, dtype=int)
        idx = np.flatnonzero(avail)
        counts[idx] = rng.integers(0, max_count, size=idx.size)
        if counts.sum() == 0:
            counts[idx[0]] = 1
        units.append(
            SampleUnit(dt.date(2010, 1, 1) + dt.timedelta(days=s), int(rng.integers(config.n_classes)),
                       counts, avail, props)
        )
    return units


@pytest.fixture
def random_instance():
    """Factory: (spec, params, units) for a random small problem."""

    def make(seed, variant=None, n=None, n_classes=None, m=None, scale=1.0):
        rng = np.random.default_rng(seed)
        n = n or int(rng.integers(2, 6))
        n_classes = n_classes or int(rng.integers(1, 4))
        m = m or int(rng.integers(1, 11))
        variant = variant or ("m1", "m2", "m3", "m4", "m5", "m6")[int(rng.integers(6))]
        cfg = CourtConfig(n, tuple(f"k{i}" for i in range(n_classes)), int(rng.integers(1, n + 1)))
        spec = ModelSpec(variant, cfg)
        params = ParameterVector(spec, rng.normal(scale=scale, size=spec.n_params))
        return spec, params, random_units(rng, cfg, m)

    return make
