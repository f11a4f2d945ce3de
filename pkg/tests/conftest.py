from __future__ import annotations

import numpy as np
import pytest

from lossmap import data, model


@pytest.fixture(scope="session")
def small_data() -> data.Dataset:
    return data.standardize(data.gen_checkerboard(200, 2, seed=3))


@pytest.fixture(scope="session")
def arch_253() -> model.Architecture:
    return model.Architecture(2, (5,), 2)


@pytest.fixture(scope="session")
def arch_232() -> model.Architecture:
    return model.Architecture(2, (3,), 2)


def double_well() -> model.FunctionObjective:
    """f(p) = (p^2 - 1)^2 in one dimension: minima at -1 and 1, saddle at 0."""
    return model.FunctionObjective(
        lambda p: ((p[0] ** 2 - 1) ** 2, np.array([4 * p[0] * (p[0] ** 2 - 1)])),
        lambda p: np.array([[12 * p[0] ** 2 - 4]]))


def muller_like() -> model.FunctionObjective:
    """Two-dimensional surface with minima at (+-1, 0) and a saddle at the origin."""
    def fun(p):
        x, y = p
        return (x * x - 1) ** 2 + 2 * y * y, np.array([4 * x * (x * x - 1), 4 * y])
    return model.FunctionObjective(fun)


def quadratic(target: np.ndarray, scale: float = 1.0) -> model.FunctionObjective:
    return model.FunctionObjective(
        lambda p: (0.5 * scale * float((p - target) @ (p - target)), scale * (p - target)),
        lambda p: scale * np.eye(len(target)))


# acceptance criteria report: one line per criterion at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = (passed, detail)
    print(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}")
