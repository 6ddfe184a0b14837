import numpy as np
import pytest

from wimamba.numerics import Tensor, default_dtype, finite_difference_gradient, max_relative_error, no_grad, tsum


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_error(build, leaves, h=1e-4):
    """Max relative error between tape and central-difference gradients.

    ``build()`` must return a scalar Tensor computed from ``leaves``.
    """
    for p in leaves:
        p.grad = None
    build().backward()
    worst = 0.0
    for p in leaves:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

        def f():
            with no_grad():
                return build().item()

        numeric = finite_difference_gradient(f, p, h)
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst


def weighted_sum(out, weights):
    """Scalar projection of ``out`` with fixed random weights (exercises every output entry)."""
    return tsum(out * Tensor(weights))


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def report_criterion(number, title, checks, detail=""):
    """Record and assert an acceptance criterion; ``checks`` maps sub-claims to booleans."""
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}"
    if detail:
        line += f" | {detail}"
    if failed:
        line += f" | failed: {', '.join(failed)}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
