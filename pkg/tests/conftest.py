import numpy as np
import pytest

from vog import nn


def central_diff(f, x, eps=1e-5):
    """Central finite differences of scalar f at every element of x."""
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def assert_close_fd(got, want, rtol=1e-4, atol=1e-8):
    got, want = np.asarray(got), np.asarray(want)
    err = np.abs(got - want)
    ok = err <= atol + rtol * np.maximum(np.abs(want), np.abs(got))
    assert ok.all(), f"max abs err {err.max():.3g} at {np.argmax(err)}; got {got.ravel()[np.argmax(err)]}, " \
                     f"want {want.ravel()[np.argmax(err)]}"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    spec = nn.mlp((1, 2, 3), [5], 3, activation="tanh")
    return nn.init_params(spec, 7)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` records and prints one pass/fail line, then asserts ``ok``."""

    def check(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
        request.config.acceptance_lines.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return check
