import numpy as np
import pytest

from quasijac.models import DgpSpec, ParameterSpace, simulate


@pytest.fixture
def nls_strong():
    """NLS design with c=10, n=1000 and the box truth +- 1."""
    spec = DgpSpec("nls_weak", 1000, c=10.0, seed=11)
    model, data = simulate(spec)
    truth = model.true_theta(spec)
    space = ParameterSpace(truth - 1.0, truth + 1.0, (0,), (1,))
    return model, data, space, truth


@pytest.fixture
def nls_weak():
    spec = DgpSpec("nls_weak", 1000, c=0.0, seed=12)
    model, data = simulate(spec)
    truth = model.true_theta(spec)
    space = ParameterSpace(truth - 1.0, truth + 1.0, (0,), (1,))
    return model, data, space, truth


def random_spd(rng, d, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return (Q * np.geomspace(1.0, cond, d)) @ Q.T


_acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one summary line per acceptance criterion; printed after the run."""
    lines = request.config.stash.setdefault(_acceptance_key, [])

    def record(label: str, passed: bool, detail: str):
        lines.append(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("AC", 1)[1].split(" ", 1)[0])):
            terminalreporter.write_line(line)
