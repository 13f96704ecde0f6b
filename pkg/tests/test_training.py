import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gmpsampler import autodiff as ad
from gmpsampler.config import rng_streams
from gmpsampler.dynamics import DiffusionConfig, DiffusionSampler
from gmpsampler.losses import batch_loss, kl_loss, logvar_loss
from gmpsampler.metrics import emc
from gmpsampler.optim import Adam, clip_by_global_norm, cosine_factor, global_norm
from gmpsampler.priors import MixturePrior
from gmpsampler.targets import Funnel, GaussianMixtureTarget, IsotropicGaussian, ScaledTarget
from gmpsampler.training import HISTORY_COLUMNS, TrainConfig, train


# losses

def test_logvar_of_constant_weights_is_zero():
    assert float(logvar_loss(np.full(8, 3.7)).data) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_loss_shift_behaviour(seed, c):
    lw = np.random.default_rng(seed).standard_normal(32) * 3
    # exact up to float rounding of the shifted values
    assert float(logvar_loss(lw + c).data) == pytest.approx(float(logvar_loss(lw).data),
                                                           rel=1e-12, abs=1e-12)
    assert float(kl_loss(lw + c).data) == pytest.approx(float(kl_loss(lw).data) - c, abs=1e-12)


def test_loss_errors():
    with pytest.raises(ValueError):
        kl_loss(np.array([]))
    with pytest.raises(ValueError):
        logvar_loss(np.array([1.0]))
    s = DiffusionSampler(IsotropicGaussian(np.zeros(1)), MixturePrior.gaussian(1),
                         DiffusionConfig("NONE"))
    with pytest.raises(ValueError):
        batch_loss(s, "bogus", np.random.default_rng(0), 4)


def test_logvar_loss_exactly_invariant_to_rho_scaling_on_shared_paths():
    base = IsotropicGaussian(np.array([0.5, -1.0]), 1.5)
    vals = []
    for t in (base, ScaledTarget(base, 0.0), ScaledTarget(base, math.log(7.0))):
        s = DiffusionSampler(t, MixturePrior.gaussian(2), DiffusionConfig("DIS", n_steps=4, hidden=8))
        loss, _, _ = batch_loss(s, "logvar", np.random.default_rng(3), 64)
        vals.append(float(loss.data))
    assert vals[0] == vals[1]
    assert vals[2] == pytest.approx(vals[0], rel=1e-12)


def test_matched_prior_and_target_kl_loss_is_centered():
    t = IsotropicGaussian(np.zeros(2), 1.0)
    s = DiffusionSampler(t, MixturePrior.gaussian(2), DiffusionConfig("DBS", n_steps=16,
                                                                      dbs_drift="zero", hidden=8))
    _, traj, _ = batch_loss(s, "kl", np.random.default_rng(0), 4000)
    lw = traj.log_w_np
    # the only non-cancelling term is the prior/target mismatch of x_N after diffusion
    expected = -0.5 * 2 * 2 * s.schedule.dts_np(16).sum()
    assert abs(lw.mean() - expected) < 3 * lw.std() / math.sqrt(lw.size)


def test_none_method_kl_is_negative_marginal_elbo():
    t = IsotropicGaussian(np.array([1.0]), 2.0)
    s = DiffusionSampler(t, MixturePrior.gaussian(1), DiffusionConfig("NONE"))
    loss, traj, _ = batch_loss(s, "kl", np.random.default_rng(0), 100)
    x = traj.samples
    assert float(loss.data) == pytest.approx(
        -np.mean(t.log_rho_np(x) - s.prior.log_density_np(x)), rel=1e-13)


# optimizer

def _param(v):
    return ad.Parameter(np.asarray(v, dtype=np.float64))


def test_adam_zero_gradient_leaves_parameters():
    p = _param([1.0, 2.0])
    opt = Adam({"g": ([p], 0.1)})
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_clip_scales_by_global_norm():
    g = [np.array([6.0, 0.0]), np.array([[8.0]])]
    assert global_norm(g) == 10.0
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == 10.0
    np.testing.assert_allclose(clipped[0], [0.6, 0.0])
    np.testing.assert_allclose(clipped[1], [[0.8]])
    same, _ = clip_by_global_norm([np.array([0.1])], 1.0)
    np.testing.assert_array_equal(same[0], [0.1])


def test_adam_first_step_uses_clipped_gradient():
    p = _param([0.0, 0.0])
    opt = Adam({"g": ([p], 0.5)}, clip=1.0)
    opt.step([np.array([6.0, 8.0])])
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p.data, [-0.5, -0.5], rtol=1e-6)


def test_adam_converges_on_quadratic():
    p = _param([5.0])
    opt = Adam({"g": ([p], 0.05)}, clip=None)
    for step in range(2000):
        opt.step([2.0 * (p.data - 1.3)], cosine_factor(step, 2000))
    assert abs(p.data[0] - 1.3) < 1e-3


def test_adam_skips_nonfinite_steps_and_tracks_new_params():
    p = _param([1.0])
    opt = Adam({"g": ([p], 0.1)})
    assert not opt.step([np.array([np.nan])])
    assert opt.skipped == 1 and p.data[0] == 1.0 and not opt.state
    q = _param([0.0])
    opt.add_params("g", [q])
    assert opt.step([np.array([1.0]), np.array([1.0])])
    with pytest.raises(ValueError):
        opt.step([np.array([1.0])])
    with pytest.raises(ValueError):
        Adam({"g": ([p], 0.0)})


def test_cosine_schedule_shape():
    assert cosine_factor(0, 100) == 1.0
    assert cosine_factor(39, 100) == 1.0
    assert cosine_factor(40, 100) == 1.0
    assert cosine_factor(70, 100) == pytest.approx(0.5)
    assert cosine_factor(100, 100) == pytest.approx(0.0, abs=1e-15)
    vals = [cosine_factor(s, 100) for s in range(100)]
    assert np.all(np.diff(vals) <= 0)


# training loop

def _streams(seed=0):
    return rng_streams(seed)


def test_gvi_recovers_gaussian_target():
    mu, var = np.array([1.5, -2.0]), 2.25
    s = DiffusionSampler(IsotropicGaussian(mu, var), MixturePrior.gaussian(2), DiffusionConfig("NONE"))
    train(s, TrainConfig(steps=3000, batch=256, eval_batch=256), _streams())
    c = s.prior.components[0]
    np.testing.assert_allclose(c.mean.data, mu, atol=1e-2)
    np.testing.assert_allclose(c.std_np(), math.sqrt(var), atol=1e-2)


def test_gmvi_two_components_cover_both_modes():
    t = GaussianMixtureTarget([[-4.0], [4.0]], [[[1.0]], [[1.0]]])
    prior = MixturePrior.mixture([[-1.0], [1.0]])
    s = DiffusionSampler(t, prior, DiffusionConfig("NONE"))
    res = train(s, TrainConfig(steps=1500, batch=256, eval_batch=1000), _streams(1))
    means = sorted(float(c.mean.data[0]) for c in s.prior.components)
    assert means[0] == pytest.approx(-4.0, abs=0.2) and means[1] == pytest.approx(4.0, abs=0.2)
    x, _ = s.prior.sample(np.random.default_rng(0), 4000)
    assert emc(x, t.mode_centers) >= 0.95
    assert res.final["emc"] >= 0.95


def test_loss_decreases_on_mismatched_gaussian():
    t = IsotropicGaussian(np.array([2.0]), 0.5)
    s = DiffusionSampler(t, MixturePrior.gaussian(1), DiffusionConfig("DIS", n_steps=8, hidden=16))
    res = train(s, TrainConfig(steps=500, batch=128, eval_batch=512, eval_every=50), _streams(2))
    losses = [r["loss"] for r in res.history]
    assert np.mean(losses[-3:]) < np.mean(losses[:2]) - 0.3
    assert res.history[-1]["elbo"] > res.history[0]["elbo"]


def test_training_is_deterministic_and_logs(tmp_path):
    def run(path):
        t = IsotropicGaussian(np.array([1.0, 0.0]), 1.0)
        s = DiffusionSampler(t, MixturePrior.mixture(np.zeros((2, 2))),
                             DiffusionConfig("DBS", n_steps=4, hidden=8))
        return train(s, TrainConfig(steps=30, batch=32, eval_batch=64, eval_every=10),
                     _streams(4), log_path=path)
    a, b = run(tmp_path / "a.csv"), run(tmp_path / "b.csv")
    rows_a = list(csv.reader(open(tmp_path / "a.csv")))
    rows_b = list(csv.reader(open(tmp_path / "b.csv")))
    assert rows_a[0] == HISTORY_COLUMNS
    strip = HISTORY_COLUMNS.index("seconds")
    assert [r[:strip] for r in rows_a] == [r[:strip] for r in rows_b]
    assert len(rows_a) == 4
    assert a.best_state == b.best_state


def test_best_state_tracks_running_average():
    t = IsotropicGaussian(np.array([3.0]), 1.0)
    s = DiffusionSampler(t, MixturePrior.gaussian(1), DiffusionConfig("NONE"))
    res = train(s, TrainConfig(steps=200, batch=64, eval_batch=256, eval_every=20, window=3),
                _streams(5))
    avgs = [r["elbo_avg"] for r in res.history]
    assert res.best_score == pytest.approx(max(avgs))
    assert res.best_step == res.history[int(np.argmax(avgs))]["step"]


def test_jensen_on_training_history():
    t = IsotropicGaussian(np.array([1.0]), 1.0)
    s = DiffusionSampler(t, MixturePrior.gaussian(1, mean=-1.0), DiffusionConfig("DIS", n_steps=4,
                                                                                 hidden=8))
    res = train(s, TrainConfig(steps=40, batch=32, eval_batch=128, eval_every=10), _streams(6))
    for r in res.history:
        assert r["log_z_hat"] >= r["elbo"]
        assert r["delta_log_z"] == pytest.approx(abs(r["log_z_hat"]))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=0)
    with pytest.raises(ValueError):
        TrainConfig(loss="logvar", batch=1)
    with pytest.raises(ValueError):
        TrainConfig(select="loss")
    assert TrainConfig(steps=3000).eval_interval == 30


@pytest.mark.slow
def test_logvar_training_close_to_kl_on_funnel():
    results = {}
    for loss in ("kl", "logvar"):
        s = DiffusionSampler(Funnel(), MixturePrior.gaussian(10),
                             DiffusionConfig("DIS", n_steps=16, hidden=32))
        res = train(s, TrainConfig(steps=1500, batch=128, eval_batch=1000, loss=loss), _streams(7))
        results[loss] = res.final["elbo_avg"]
    assert abs(results["logvar"] - results["kl"]) < 0.5
