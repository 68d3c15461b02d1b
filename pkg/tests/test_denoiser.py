import numpy as np
import pytest

from meldiff.denoiser import (AnalyticGaussianDenoiser, GaussianDataSpec, ToyDenoiser,
                              ZeroPredictor, analytic_predict, check_gradients,
                              conditional_gaussian_dataset, default_conditional_spec,
                              evaluation_batch, grad_check, init_toy_params, sinusoid_dataset,
                              toy_predict, toy_train)
from meldiff.forward import TrainingBatch, l1_loss


def test_uninformative_prior_gives_zero_noise(sched, rng):
    spec = GaussianDataSpec([0.0], [1e6])
    x = rng.standard_normal((1, 7))
    assert np.max(np.abs(analytic_predict(spec, x, 150, sched))) < 1e-6


def test_noised_mean_gives_zero_noise(sched):
    spec = GaussianDataSpec([1.0, -3.0], [0.5, 2.0])
    for t in (1, 100, 400):
        x = np.sqrt(sched.alpha_bars[t]) * spec.mu[:, None] * np.ones((2, 4))
        assert np.allclose(analytic_predict(spec, x, t, sched), 0.0, atol=1e-12)


def test_analytic_rejects_step(sched):
    with pytest.raises(ValueError):
        analytic_predict(GaussianDataSpec([0.0], [1.0]), np.zeros((1, 1)), 0, sched)


def test_analytic_matches_binned_monte_carlo(sched):
    """Bin (x_t, eps) pairs by x_t and compare the per-bin mean of eps.

    The exact predictor is affine in x_t, so its value at the in-bin mean of
    x_t equals the in-bin mean of its values.
    """
    mu, s, t, n = 1.0, 0.5, 200, 2_000_000
    gen = np.random.default_rng(17)
    x0 = mu + s * gen.standard_normal(n)
    eps = gen.standard_normal(n)
    ab = sched.alpha_bars[t]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    edges = np.quantile(xt, np.linspace(0.02, 0.98, 25))
    which = np.digitize(xt, edges)
    spec = GaussianDataSpec([mu], [s])
    for b in range(1, len(edges)):
        sel = which == b
        e_bin = eps[sel]
        pred = analytic_predict(spec, np.array([[xt[sel].mean()]]), t, sched)[0, 0]
        se = e_bin.std(ddof=1) / np.sqrt(sel.sum())
        assert abs(e_bin.mean() - pred) < 3 * se


def test_conditional_spec_selects_by_label(sched):
    spec = GaussianDataSpec([[1.0], [-1.0]], [[0.5], [0.2]])
    ctx = np.array([[1.0, 0.0], [0.0, 1.0]])
    x = np.array([[0.3, 0.3]])
    both = analytic_predict(spec, x, 50, sched, ctx)
    a = analytic_predict(GaussianDataSpec([1.0], [0.5]), x[:, :1], 50, sched)
    b = analytic_predict(GaussianDataSpec([-1.0], [0.2]), x[:, 1:], 50, sched)
    assert np.allclose(both, np.hstack([a, b]))


def test_spec_validation():
    with pytest.raises(ValueError):
        GaussianDataSpec([0.0, 1.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        GaussianDataSpec([0.0, 1.0], [1.0])


def test_toy_zero_params_predict_zero(rng):
    p = init_toy_params(2, 3, rng=rng)
    for w, b in zip(p.weights, p.biases):
        w[:] = 0
        b[:] = 0
    out = toy_predict(p, rng.standard_normal((4, 2, 5)), 10, rng.standard_normal((3, 5)))
    assert out.shape == (4, 2, 5) and not out.any()


def test_toy_identity_layer(rng):
    p = init_toy_params(1, 2, layers=0, emb_dim=4, rng=rng)
    p.weights[0][:] = 0
    p.weights[0][0, 0] = 1.0
    x = rng.standard_normal((1, 6))
    assert np.array_equal(toy_predict(p, x, 33, rng.standard_normal((2, 6))), x)


def test_toy_predict_is_repeatable(rng):
    p = init_toy_params(2, 3, rng=rng)
    x, ctx = rng.standard_normal((3, 2, 5)), rng.standard_normal((3, 3, 5))
    t = np.array([4, 90, 311])
    a = toy_predict(p, x, t, ctx)
    assert a.tobytes() == toy_predict(p, x, t, ctx).tobytes()


def test_toy_dimension_errors(rng):
    p = init_toy_params(2, 3, rng=rng)
    with pytest.raises(ValueError):
        toy_predict(p, np.zeros((3, 5)), 1, np.zeros((3, 5)))
    with pytest.raises(ValueError):
        toy_predict(p, np.zeros((2, 5)), 1, np.zeros((2, 5)))


@pytest.fixture(scope="module")
def cond_data():
    gen = np.random.default_rng(5)
    spec = default_conditional_spec()
    return spec, conditional_gaussian_dataset(spec, 2048, 8, gen), gen


def test_zero_learning_rate_keeps_params(sched, cond_data):
    spec, data, _ = cond_data
    p0 = init_toy_params(2, 3, rng=1)
    p1, losses = toy_train(p0, data, sched, 60, learning_rate=0.0, rng=2)
    assert p1.flat().tobytes() == p0.flat().tobytes()
    assert abs(losses[:30].mean() - losses[30:].mean()) < 0.1 * losses.mean()


def test_training_is_seed_reproducible(sched, cond_data):
    _, data, _ = cond_data
    p0 = init_toy_params(2, 3, rng=1)
    _, a = toy_train(p0, data, sched, 50, rng=3)
    _, b = toy_train(p0, data, sched, 50, rng=3)
    assert a.tobytes() == b.tobytes()


def test_training_aborts_on_nonfinite(sched, cond_data):
    _, data, _ = cond_data
    p0 = init_toy_params(2, 3, rng=1)
    p0.weights[-1][0, 0] = np.inf
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        toy_train(p0, data, sched, 3, rng=0)


def test_empty_dataset_rejected(sched, cond_data):
    _, data, _ = cond_data
    from meldiff.denoiser import Dataset
    with pytest.raises(ValueError):
        toy_train(init_toy_params(2, 3), Dataset(data.x0[:0], data.context[:0]), sched, 1)


@pytest.fixture(scope="module")
def trained(sched, cond_data):
    spec, data, _ = cond_data
    params, _ = toy_train(init_toy_params(2, 3, rng=4), data, sched, 600, rng=6)
    return params


def test_oracle_is_optimal_on_held_out(sched, cond_data, trained):
    spec, _, _ = cond_data
    held = conditional_gaussian_dataset(spec, 625, 8, 99)  # 10^4 draws across both channels
    batch = evaluation_batch(held, sched, 100)
    oracle = l1_loss(AnalyticGaussianDenoiser(spec, sched), batch, sched)
    assert oracle <= l1_loss(ToyDenoiser(trained), batch, sched)
    assert oracle <= l1_loss(ZeroPredictor(), batch, sched)


def test_quadratic_surrogate_gradient_is_exact():
    gen = np.random.default_rng(0)
    a = gen.standard_normal((30, 30))
    a = a @ a.T
    theta = gen.standard_normal(30)

    def f(v):
        return 0.5 * v @ a @ v

    assert check_gradients(f, a @ theta, theta, np.arange(30), 1e-5) < 1e-7


def _grad_batch(data):
    return TrainingBatch(data.x0[:16], data.context[:16])


def test_grad_check_trained_network(sched, cond_data, trained):
    _, data, _ = cond_data
    assert grad_check(trained, _grad_batch(data), sched, rng=1) < 1e-4


def test_grad_check_truncation_order(sched, cond_data):
    # A fresh net on a few items keeps every residual away from the L1 kink
    # even at h = 1e-2, so only truncation error remains.
    _, data, _ = cond_data
    params = init_toy_params(2, 3, rng=8)
    batch = TrainingBatch(data.x0[:4], data.context[:4])
    coarse = grad_check(params, batch, sched, perturbation=1e-2, rng=1)
    mid = grad_check(params, batch, sched, perturbation=1e-3, rng=1)
    fine = grad_check(params, batch, sched, perturbation=1e-5, rng=1)
    assert fine < coarse
    # central differences: error ~ h^2, so a 10x step gives ~100x error
    assert 30 < coarse / mid < 300


def test_grad_check_leaves_params_untouched(sched, cond_data, trained):
    _, data, _ = cond_data
    before = trained.flat().copy()
    grad_check(trained, _grad_batch(data), sched, rng=2)
    assert np.array_equal(before, trained.flat())


def test_context_changes_sinusoid_predictions(sched):
    data = sinusoid_dataset(512, 2, 16, n_patterns=3, rng=0)
    params, losses = toy_train(init_toy_params(2, 4, rng=1), data, sched, 400, rng=2)
    assert losses[-50:].mean() < losses[:50].mean()
    x = np.random.default_rng(3).standard_normal((2, 16))
    outs = []
    for label in range(3):
        ctx = np.zeros((4, 16))
        ctx[label] = 1.0
        ctx[-1] = np.linspace(0, 1, 16)
        outs.append(toy_predict(params, x, 20, ctx))
    assert np.abs(outs[0] - outs[2]).mean() > 1e-2
