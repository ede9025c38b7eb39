from importlib.resources import files

import numpy as np
import pytest

from soltype.group_model import NilpotentFactor, SolTypeGroup, load_group
from soltype.splitting_metric import load_metric

DATA = files("soltype") / "data"

ACCEPTANCE_LINES = []


def bundled(group_name, metric_name):
    group = load_group(DATA / (group_name + ".json"))
    return group, load_metric(DATA / (metric_name + ".json"), group)


def hyperbolic_distance(h, v, scale=1.0):
    """Distance from the origin to ``(h, v)`` for ``scale^2 dv^2 + e^{-2v} dh^2``.

    The substitution ``Y = e^v``, ``X = h / scale`` gives a hyperbolic plane
    of curvature ``-1/scale^2``.
    """
    y = np.exp(v)
    return scale * np.arccosh(1.0 + ((h / scale) ** 2 + (y - 1.0) ** 2) / (2.0 * y))


@pytest.fixture(scope="session")
def rank2():
    return bundled("rank2_group", "rank2_identity")


@pytest.fixture(scope="session")
def rank2_stretched():
    group, _ = bundled("rank2_group", "rank2_identity")
    return load_metric(DATA / "rank2_diag41.json", group)


@pytest.fixture(scope="session")
def example():
    return bundled("example_group", "example_metric")


@pytest.fixture(scope="session")
def jordan():
    return bundled("jordan_group", "jordan_metric")


@pytest.fixture(scope="session")
def heisenberg():
    return bundled("heisenberg_group", "heisenberg_metric")


def line_group(derivations, roots):
    return SolTypeGroup([NilpotentFactor(D) for D in derivations], roots)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
