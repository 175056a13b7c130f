import numpy as np
import pytest

from nsync.diffusion import (
    DEFAULT_DDIM_STEPS,
    ddim_sample,
    ddim_timesteps,
    make_linear_schedule,
    q_sample,
    ti_loss,
)
from nsync.errors import NumericalError
from nsync.metrics import FeatureExtractor, extract_features
from nsync.model import DenoiserConfig, Model
from nsync.numerics import AdamState, adam_step
from nsync.numerics import autodiff as ad


def test_two_step_schedule():
    s = make_linear_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.alphas, 1.0 - s.betas, rtol=0, atol=0)


@pytest.mark.parametrize("T,lo,hi", [(2, 0.1, 0.2), (10, 1e-3, 0.5), (200, 1e-4, 0.02), (1000, 1e-4, 0.02)])
def test_alpha_bars_strictly_decreasing(T, lo, hi):
    s = make_linear_schedule(T, lo, hi)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))


def test_default_schedule_regression():
    s = make_linear_schedule()
    assert s.T == 200
    assert s.alpha_bars[0] == pytest.approx(0.9999, abs=1e-15)
    assert s.alpha_bars[-1] < 0.15
    # frozen from the first computation
    assert s.alpha_bars[-1] == pytest.approx(0.13218275425061793, rel=1e-12)


@pytest.mark.parametrize("args", [(1, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
def test_schedule_rejects_bad_bounds(args):
    with pytest.raises(ValueError):
        make_linear_schedule(*args)


def test_q_sample_near_identity_at_t0(rng):
    s = make_linear_schedule()
    x = rng.standard_normal(64)
    z = q_sample(x, 0, np.zeros(64), s).z_t
    np.testing.assert_allclose(z, np.sqrt(0.9999) * x, rtol=1e-15)
    assert np.sqrt(0.9999) == pytest.approx(0.99995, abs=1e-8)


def test_q_sample_zero_signal(rng):
    s = make_linear_schedule()
    eps = rng.standard_normal(64)
    for t in (0, 57, 199):
        np.testing.assert_array_equal(q_sample(np.zeros(64), t, eps, s).z_t, np.sqrt(1 - s.alpha_bars[t]) * eps)


def test_q_sample_preserves_unit_variance():
    s = make_linear_schedule()
    rng = np.random.default_rng(0)
    n, d = 100_000, 4
    t = rng.integers(0, s.T, size=n)
    z = q_sample(rng.standard_normal((n, d)), t, rng.standard_normal((n, d)), s).z_t
    var = z.var(axis=0, ddof=1)
    # std. err. of a sample variance of a unit Gaussian is sqrt(2 / (n - 1))
    assert np.all(np.abs(var - 1.0) <= 3 * np.sqrt(2.0 / (n - 1)))


def test_q_sample_rejects_bad_input():
    s = make_linear_schedule()
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 0, np.zeros(4), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 200, np.zeros(3), s)
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), -1, np.zeros(3), s)


def test_ti_loss_perfect_and_zero_predictors(rng):
    s = make_linear_schedule()
    z0 = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 5))
    t = np.array([1, 2, 3])
    perfect = ti_loss(lambda z, tt, c: ad.Node(eps), z0, t, eps, None, s)
    assert perfect.value == 0.0
    zero = ti_loss(lambda z, tt, c: ad.Node(np.zeros_like(eps)), z0, t, eps, None, s)
    assert zero.value == pytest.approx(np.mean(eps**2), rel=1e-15)


def test_ti_loss_rejects_non_finite(rng):
    s = make_linear_schedule()
    eps = rng.standard_normal((2, 3))
    with pytest.raises(NumericalError):
        ti_loss(lambda z, tt, c: ad.Node(np.full((2, 3), np.nan)), np.zeros((2, 3)), 0, eps, None, s)


def _independent_forward(model, z_t, t, cond):
    """Plain numpy re-implementation of the denoiser forward pass."""
    cfg = model.config
    half = cfg.d_time // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = np.outer(t.astype(float), freqs)
    h = np.hstack([z_t, np.sin(ang), np.cos(ang), cfg.cond_scale * cond])
    for i in range(cfg.n_layers):
        h = h @ model.params[f"layer{i}.weight"] + model.params[f"layer{i}.bias"]
        if i < cfg.n_layers - 1:
            h = h / (1.0 + np.exp(-h))
    return h


def test_ti_loss_matches_independent_forward(rng):
    cfg = DenoiserConfig(d_data=6, d_hidden=11, n_layers=3, d_time=4, d_e=5)
    model = Model.init(cfg, 2, ("GENERIC",), seed=3)
    s = model.schedule
    z0 = rng.standard_normal((4, 6))
    eps = rng.standard_normal((4, 6))
    t = np.array([0, 10, 100, 199])
    cond = model.cond_batch([0, 1, 1, 0], "GENERIC")
    leaves = model.graph_leaves()
    loss = ti_loss(lambda z, tt, c: model.denoise_graph(z, tt, ad.Node(c), leaves), z0, t, eps, cond, s)
    z_t = np.sqrt(s.alpha_bars[t])[:, None] * z0 + np.sqrt(1 - s.alpha_bars[t])[:, None] * eps
    want = np.mean((eps - _independent_forward(model, z_t, t, cond)) ** 2)
    assert abs(loss.value - want) <= 1e-12
    np.testing.assert_allclose(model.eps_hat(z_t, t, cond), _independent_forward(model, z_t, t, cond), rtol=1e-12, atol=1e-14)


def test_ddim_timesteps():
    steps = ddim_timesteps(200, 50)
    assert len(steps) == 50 and steps[0] == 199 and steps[-1] == 0
    assert np.all(np.diff(steps) < 0)
    np.testing.assert_array_equal(ddim_timesteps(200, 200), np.arange(199, -1, -1))
    with pytest.raises(ValueError):
        ddim_timesteps(200, 0)
    with pytest.raises(ValueError):
        ddim_timesteps(200, 201)


def test_ddim_default_step_count():
    assert DEFAULT_DDIM_STEPS == 50


def test_ddim_is_deterministic():
    cfg = DenoiserConfig(d_data=6, d_hidden=11, d_time=4, d_e=5)
    model = Model.init(cfg, 2, ("GENERIC",), seed=3)
    cond = model.cond_batch([0, 1, 1], "GENERIC")
    a = ddim_sample(model.eps_hat, cond, 50, 7, model.schedule, 6)
    b = ddim_sample(model.eps_hat, cond, 50, 7, model.schedule, 6)
    c = ddim_sample(model.eps_hat, cond, 50, 8, model.schedule, 6)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


def test_ddim_with_oracle_denoiser_recovers_point_mass():
    # for data concentrated at mu the optimal predictor is (z - sqrt(ab) mu) / sqrt(1 - ab)
    s = make_linear_schedule()
    mu = np.linspace(-1, 1, 5)

    def eps_fn(z, t, cond):
        ab = s.alpha_bars[t][:, None]
        return (z - np.sqrt(ab) * mu) / np.sqrt(1 - ab)

    x = ddim_sample(eps_fn, np.zeros((4, 1)), 50, 0, s, 5)
    np.testing.assert_allclose(x, np.tile(mu, (4, 1)), atol=1e-10)


def test_ddim_on_trained_gaussian_blob():
    d, batch, steps = 8, 256, 5000
    mu = np.linspace(-1.0, 1.0, d)
    rng = np.random.default_rng(0)
    cfg = DenoiserConfig(d_data=d, d_hidden=64, n_layers=3, d_time=16, d_e=4)
    model = Model.init(cfg, 1, ("GENERIC",), seed=0)
    model = model.replace_params(model.params.with_trainable(sorted(model.params.params)))
    opt = AdamState.for_params(model.params, lr=2e-3)
    T = model.schedule.T
    for k in range(steps):
        opt.lr = 2e-3 * 0.05 ** (k / steps)
        x0 = mu + 0.1 * rng.standard_normal((batch, d))
        t = rng.integers(0, T, size=batch)
        eps = rng.standard_normal((batch, d))
        ab = model.schedule.alpha_bars[t][:, None]
        z = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
        _, g = model.loss_and_grad_mixed(z, t, eps, np.zeros(batch, dtype=int), np.full(batch, -1))
        model = model.replace_params(adam_step(model.params, g, opt))
    samples = model.sample(np.zeros(256, dtype=int), None, seed=1)
    fe = FeatureExtractor(d_in=d)
    train = mu + 0.1 * np.random.default_rng(1).standard_normal((256, d))
    gap = np.linalg.norm(extract_features(samples, fe).mean(0) - extract_features(train, fe).mean(0))
    # 0.078 on the first successful run
    assert gap < 0.1
