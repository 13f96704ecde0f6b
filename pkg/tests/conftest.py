import numpy as np
import pytest

from gmpsampler import autodiff as ad
from gmpsampler.config import rng_streams


def central_fd(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def scalar_fn(fn):
    """Wrap a tensor function into a float-valued numpy function for FD."""
    def f(x):
        with ad.no_grad():
            return float(fn(ad.Tensor(x)).data)
    return f


@pytest.fixture
def streams():
    return rng_streams(0)


def gaussian_chain_expected_log_w(mu0, s0, mut, st, sigma, dt):
    """E[log w] for one DBS step (zero controls, target-score drift) in 1-D.

    Built symbolically: x0 = mu0 + s0 z, x1 = x0 + f(x0) dt + sigma sqrt(2 dt) e,
    then the log-weight polynomial is averaged over independent standard
    normals z, e.  Independent of the package code.
    """
    import sympy as sp
    z, e = sp.symbols("z e")
    mu0, s0, mut, st, sigma, dt = map(sp.nsimplify, (mu0, s0, mut, st, sigma, dt))
    var = 2 * sigma ** 2 * dt

    def f(x):
        return sigma ** 2 * (mut - x) / st ** 2

    def logn(y, m, v):
        return -(y - m) ** 2 / (2 * v) - sp.log(2 * sp.pi * v) / 2

    x0 = mu0 + s0 * z
    x1 = x0 + f(x0) * dt + sp.sqrt(var) * e
    lw = (logn(x1, mut, st ** 2) - logn(x0, mu0, s0 ** 2)
          + logn(x0, x1 - f(x1) * dt, var) - logn(x1, x0 + f(x0) * dt, var))
    poly = sp.Poly(sp.expand(lw), z, e)
    moments = {0: 1, 1: 0, 2: 1}
    total = sum(coef * moments[i] * moments[j] for (i, j), coef in poly.terms())
    return float(sp.N(total, 30))


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    """Store and print one acceptance line; the session summary repeats them."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
