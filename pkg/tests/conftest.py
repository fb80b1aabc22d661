import numpy as np
import pytest

from npsc.forms import H1, L2, BilinearForm, DiscreteProblem
from npsc.model import BoxDomain
from npsc.quadrature import trapezoid_rule

ACCEPTANCE_LINES: list = []


def record_acceptance(name: str, ok: bool, detail: str = "") -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def sine_problem(kind=L2, N=2001, alpha=None):
    form = BilinearForm(kind, BoxDomain.unit(1), alpha)
    return DiscreteProblem(form, lambda x: np.sin(2 * np.pi * x[:, 0]), trapezoid_rule(N))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=[L2, H1])
def kind(request):
    return request.param
