import numpy as np
import pytest
from hypothesis import settings

from lqkernel.config import parse_config
from lqkernel.kernel import LQKernel
from lqkernel.linsys import LinearSystem
from lqkernel.pipeline import Runner

# `pytest --hypothesis-profile=stress` for a longer randomized run
settings.register_profile("stress", max_examples=300, deadline=None)

# acceptance lines, keyed by criterion; printed at the end of the run
ACCEPTANCE: dict = {}


def record(key, ok, detail: str):
    """Store one acceptance line; ``ok`` of ``None`` marks an informational line."""
    tag = "INFO" if ok is None else ("PASS" if ok else "FAIL")
    line = f"{tag}  {key}: {detail}"
    ACCEPTANCE[key] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for key in sorted(ACCEPTANCE, key=lambda k: (not k.startswith("criterion"), len(k), k)):
        terminalreporter.write_line(ACCEPTANCE[key])


def scalar_system(q=0.0, **kw):
    return LinearSystem(A=[[0.0]], B=[[1.0]], Q=[[q]] if q else None, **kw)


def double_integrator(**kw):
    return LinearSystem(A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], **kw)


@pytest.fixture(scope="session")
def scalar_kernel():
    return LQKernel(scalar_system())


@pytest.fixture(scope="session")
def scalar_q_kernel():
    return LQKernel(scalar_system(q=1.0))


@pytest.fixture(scope="session")
def di_kernel():
    return LQKernel(double_integrator())


class PendulumRuns:
    """Lazily solved pendulum variants shared by the whole session."""

    def __init__(self, lambda_u=None):
        doc = {"preset": "pendulum"}
        if lambda_u is not None:
            doc["preset_options"] = {"lambda_u": lambda_u}
        self.runner = Runner(parse_config(doc))
        self._cache = {}

    def get(self, n_points=200, scale=None):
        """``scale`` multiplies eta of every constraint family."""
        key = (n_points, scale)
        if key not in self._cache:
            labels = self.runner.problem.constraints.labels
            self._cache[key] = self.runner.run(n_points=n_points, eta_scale=scale, eta_families=labels)
        return self._cache[key]


@pytest.fixture(scope="session")
def pendulum():
    return PendulumRuns()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240611)
