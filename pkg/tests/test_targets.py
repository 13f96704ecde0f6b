import math

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from gmpsampler import autodiff as ad
from gmpsampler.targets import (DatasetError, Funnel, GaussianMixtureTarget, IsotropicGaussian,
                                Phi4Lattice, ScaledTarget, load_csv_dataset, magnetization,
                                make_target, random_gmm_target, standardize, synthetic_logreg)
from conftest import central_fd, rel_err

TARGETS = {
    "gaussian": lambda: IsotropicGaussian(np.array([0.5, -1.0, 2.0]), 2.0),
    "funnel": lambda: Funnel(),
    "gmm": lambda: random_gmm_target(seed=3),
    "logreg": lambda: synthetic_logreg(seed=1),
    "phi4": lambda: Phi4Lattice(L=4, kappa=0.2),
}


@pytest.mark.parametrize("name", sorted(TARGETS))
def test_score_matches_finite_differences(name):
    t = TARGETS[name]()
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.standard_normal(t.dim) * (0.5 if name == "logreg" else 1.5)
        if name == "gmm":
            x = x * 4
        fd = central_fd(lambda z: float(t.log_rho_np(z)[0]), x)
        assert rel_err(t.score_np(x)[0], fd) < 1e-4


def test_closed_form_values():
    assert float(Funnel().log_rho_np(np.zeros(10))[0]) == pytest.approx(
        -0.5 * math.log(2 * math.pi * 9) - 4.5 * math.log(2 * math.pi), abs=1e-12)
    g = IsotropicGaussian(np.zeros(2), 1.0)
    assert float(g.log_rho_np(np.zeros(2))[0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-14)
    x = np.array([[0.3, -0.7]])
    np.testing.assert_allclose(g.score_np(x), -x)
    assert float(Phi4Lattice(L=2, kappa=0.0).log_rho_np(np.zeros(4))[0]) == 0.0


def test_funnel_matches_definition():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 10))
    ref = (-0.5 * x[:, 0] ** 2 / 9 - 0.5 * math.log(2 * math.pi * 9)
           + np.sum(-0.5 * x[:, 1:] ** 2 * np.exp(-x[:, :1]) - 0.5 * x[:, :1]
                    - 0.5 * math.log(2 * math.pi), axis=1))
    np.testing.assert_allclose(Funnel().log_rho_np(x), ref, rtol=1e-12)


def test_gmm_matches_scipy_and_metadata():
    t = random_gmm_target(seed=5)
    x = np.random.default_rng(0).uniform(-14, 14, (30, 2))
    ref = logsumexp([multivariate_normal(m, c).logpdf(x) for m, c in zip(t.means, t.covs)],
                    axis=0) - math.log(10)
    np.testing.assert_allclose(t.log_rho_np(x), ref, rtol=1e-10)
    assert t.log_z == 0.0
    np.testing.assert_array_equal(t.mode_centers, t.means)
    assert np.all((t.means >= -12) & (t.means <= 12))


def test_logreg_matches_bernoulli_likelihood():
    t = synthetic_logreg(seed=2)
    w = np.random.default_rng(0).standard_normal(t.dim) * 0.3
    z = t.X @ w
    s = 1 / (1 + np.exp(-z))
    ref = (np.sum(t.y * np.log(s) + (1 - t.y) * np.log(1 - s))
           + multivariate_normal(np.zeros(t.dim), 100 * np.eye(t.dim)).logpdf(w))
    assert float(t.log_rho_np(w)[0]) == pytest.approx(ref, rel=1e-10)


def test_phi4_hand_derived_gradient_and_symmetries():
    t = Phi4Lattice(L=4, kappa=0.2)
    rng = np.random.default_rng(3)
    phi = rng.standard_normal(16)
    f = phi.reshape(4, 4)
    nb = (np.roll(f, 1, 0) + np.roll(f, -1, 0) + np.roll(f, 1, 1) + np.roll(f, -1, 1)).ravel()
    lam, kap = 0.022, 0.2
    grad_u = 4 * lam * phi ** 3 + 2 * (1 - 2 * lam) * phi - 2 * kap * nb
    np.testing.assert_allclose(t.score_np(phi)[0], -grad_u, rtol=1e-12)
    u = float(t.potential(phi).data[0])
    shifted = np.roll(f, (1, 2), axis=(0, 1)).ravel()
    assert float(t.potential(shifted).data[0]) == pytest.approx(u, rel=1e-12)
    assert float(t.potential(-phi).data[0]) == pytest.approx(u, rel=1e-12)


def test_magnetization():
    assert magnetization(np.zeros((4, 4))) == 0.0
    assert magnetization(np.ones((4, 4))) == 16.0
    phi = np.random.default_rng(0).standard_normal((4, 4))
    assert magnetization(-phi) == -magnetization(phi)
    batch = np.random.default_rng(1).standard_normal((3, 16))
    np.testing.assert_allclose(magnetization(batch), batch.sum(axis=1))


@pytest.mark.parametrize("name", ["gaussian", "funnel", "gmm"])
def test_importance_sampling_recovers_log_z(name):
    t = TARGETS[name]()
    rng = np.random.default_rng(11)
    n = 100_000
    scale = {"gaussian": 3.0, "funnel": 4.0, "gmm": 10.0}[name]
    if name == "funnel":
        # x1 from its marginal, the rest from a 1.2x widened conditional
        x1 = 3.0 * rng.standard_normal(n)
        sd = 1.2 * np.exp(0.5 * x1)[:, None]
        rest = sd * rng.standard_normal((n, 9))
        x = np.column_stack([x1, rest])
        log_q = (-0.5 * x1 ** 2 / 9 - 0.5 * math.log(2 * math.pi * 9)
                 + np.sum(-0.5 * (rest / sd) ** 2 - np.log(sd) - 0.5 * math.log(2 * math.pi), axis=1))
        lw = t.log_rho_np(x) - log_q
        truth = 0.0
    else:
        x = scale * rng.standard_normal((n, t.dim))
        log_q = np.sum(-0.5 * x ** 2 / scale ** 2 - 0.5 * math.log(2 * math.pi * scale ** 2), axis=1)
        lw = t.log_rho_np(x) - log_q
        truth = t.log_z
    w = np.exp(lw - lw.max())
    est = math.log(w.mean()) + lw.max()
    se = w.std() / w.mean() / math.sqrt(n)     # delta-method SE of log mean
    assert abs(est - truth) < 3 * se + 1e-12


def test_csv_ingestion(tmp_path):
    p = tmp_path / "toy.csv"
    p.write_text("a,b,label\n1.0,5.0,0\n3.0,5.0,1\n")
    X, y = load_csv_dataset(str(p), "label")
    np.testing.assert_array_equal(y, [0.0, 1.0])
    np.testing.assert_allclose(X[:, 0].mean(), 0.0, atol=1e-15)
    np.testing.assert_allclose(X[:, 1], 0.0)        # constant column only centered
    np.testing.assert_array_equal(X[:, -1], 1.0)    # intercept appended
    bad = tmp_path / "bad.csv"
    bad.write_text("a,label\n1.0,2\n")
    with pytest.raises(DatasetError):
        load_csv_dataset(str(bad), "label")
    with pytest.raises(DatasetError):
        load_csv_dataset(str(p), "missing")
    junk = tmp_path / "junk.csv"
    junk.write_text("a,label\nx,1\n")
    with pytest.raises(DatasetError):
        load_csv_dataset(str(junk), "label")


def test_standardize_is_idempotent():
    X = np.random.default_rng(0).standard_normal((50, 4)) * [1, 5, 0.1, 3] + [2, -1, 0, 7]
    once = standardize(X)
    np.testing.assert_allclose(standardize(once), once, atol=1e-12)
    np.testing.assert_allclose(once.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(once.std(axis=0), 1, atol=1e-12)


def test_dimension_mismatch_and_unknown_target():
    with pytest.raises(ad.ShapeError):
        Funnel().log_rho(np.zeros((2, 3)))
    with pytest.raises(KeyError):
        make_target("nope")


def test_scaled_target_shifts_log_rho():
    base = Funnel()
    t = ScaledTarget(base, 2.5)
    x = np.random.default_rng(0).standard_normal((4, 10))
    np.testing.assert_allclose(t.log_rho_np(x), base.log_rho_np(x) + 2.5)
    np.testing.assert_array_equal(t.score_np(x), base.score_np(x))


def test_phi4_decoupled_log_z_from_quadrature():
    t = Phi4Lattice(L=2, kappa=0.0)
    from scipy.integrate import quad
    val, _ = quad(lambda s: math.exp(-(1 - 2 * 0.022) * s * s - 0.022 * s ** 4), -20, 20)
    assert t.log_z == pytest.approx(4 * math.log(val), rel=1e-10)
