import numpy as np
import pytest

from meldiff.denoiser import AnalyticGaussianDenoiser, GaussianDataSpec, ZeroPredictor
from meldiff.forward import TrainingBatch, diffuse_chain, diffuse_step, l1_loss, q_sample
from meldiff.schedule import ScheduleError, from_betas


class FixedRng:
    """Stands in for a generator and always returns ``value``."""

    def __init__(self, value):
        self.value = value

    def standard_normal(self, shape):
        return np.broadcast_to(self.value, shape).copy()


class EchoPredictor:
    def __init__(self, eps):
        self.eps = eps

    def predict(self, x_t, t, context):
        return self.eps


def test_diffuse_step_with_zero_noise_and_tiny_beta():
    s = from_betas([1e-300, 0.5])
    x = np.array([[1.5, -2.0]])
    assert np.array_equal(diffuse_step(x, 1, s, FixedRng(0.0)), x)


def test_diffuse_step_zero_signal(sched):
    w = np.array([[0.3, -1.2, 2.0]])
    out = diffuse_step(np.zeros((1, 3)), 7, sched, FixedRng(w))
    assert np.allclose(out, np.sqrt(sched.betas[7]) * w)


def test_diffuse_step_rejects_range(sched):
    with pytest.raises(ScheduleError):
        diffuse_step(np.zeros((1, 1)), 0, sched, 0)
    with pytest.raises(ScheduleError):
        diffuse_step(np.zeros((1, 1)), 401, sched, 0)


def test_diffuse_step_reproducible(sched):
    x = np.ones((3, 4))
    a = diffuse_step(x, 100, sched, 5)
    b = diffuse_step(x, 100, sched, 5)
    assert a.tobytes() == b.tobytes()
    assert a.shape == x.shape


def test_diffuse_step_moments(sched):
    n, t, x_prev = 100_000, 300, 0.8
    out = diffuse_step(np.full((n, 1, 1), x_prev), t, sched, 11).ravel()
    beta = sched.betas[t]
    mean_se = np.sqrt(beta / n)
    var_se = beta * np.sqrt(2.0 / (n - 1))
    assert abs(out.mean() - np.sqrt(1 - beta) * x_prev) < 3 * mean_se
    assert abs(out.var(ddof=1) - beta) < 3 * var_se


def test_q_sample_branches(sched, rng):
    x0 = rng.standard_normal((2, 5))
    eps = rng.standard_normal((2, 5))
    ab = sched.alpha_bars[90]
    assert np.array_equal(q_sample(x0, 90, np.zeros_like(x0), sched), np.sqrt(ab) * x0)
    assert np.array_equal(q_sample(np.zeros_like(x0), 90, eps, sched), np.sqrt(1 - ab) * eps)
    with pytest.raises(ValueError):
        q_sample(x0, 90, eps[:, :3], sched)


def test_q_sample_per_item_steps(sched, rng):
    x0 = rng.standard_normal((3, 2, 4))
    eps = rng.standard_normal((3, 2, 4))
    t = np.array([1, 200, 400])
    out = q_sample(x0, t, eps, sched)
    for i in range(3):
        assert np.allclose(out[i], q_sample(x0[i], t[i], eps[i], sched), rtol=0, atol=0)


def test_energy_split(sched):
    ab = sched.alpha_bars[1:]
    assert np.all(ab + (1 - ab) == 1.0)


def test_chain_matches_closed_form_marginal(sched):
    n, t, x0 = 100_000, 60, 1.3
    out = diffuse_chain(np.full((n, 1, 1), x0), t, sched, 3).ravel()
    ab = sched.alpha_bars[t]
    var = 1 - ab
    assert abs(out.mean() - np.sqrt(ab) * x0) < 3 * np.sqrt(var / n)
    assert abs(out.var(ddof=1) - var) < 3 * var * np.sqrt(2.0 / (n - 1))


def _batch(rng, b=4, c=2, f=5, d=3, fixed=True, T=400):
    x0 = rng.standard_normal((b, c, f))
    ctx = rng.standard_normal((b, d, f))
    if not fixed:
        return TrainingBatch(x0, ctx)
    return TrainingBatch(x0, ctx, eps=rng.standard_normal((b, c, f)),
                         t=rng.integers(1, T + 1, size=b))


def test_l1_perfect_and_zero_predictors(sched, rng):
    batch = _batch(rng)
    assert l1_loss(EchoPredictor(batch.eps), batch, sched) == 0.0
    assert l1_loss(ZeroPredictor(), batch, sched) == pytest.approx(np.mean(np.abs(batch.eps)))


def test_l1_rejects_bad_predictor_shape(sched, rng):
    batch = _batch(rng)
    with pytest.raises(ValueError):
        l1_loss(EchoPredictor(np.zeros((1, 1))), batch, sched)


def test_batch_validation(rng):
    with pytest.raises(ValueError):
        TrainingBatch(rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 3, 5)))
    with pytest.raises(ValueError):
        TrainingBatch(rng.standard_normal((2, 1, 4)), rng.standard_normal((2, 3, 4)), t=[1])


def test_l1_deterministic_with_seed(sched, rng):
    batch = _batch(rng, fixed=False)
    spec = GaussianDataSpec([0.0, 1.0], [1.0, 0.4])
    pred = AnalyticGaussianDenoiser(spec, sched)
    assert l1_loss(pred, batch, sched, rng=9) == l1_loss(pred, batch, sched, rng=9)


def test_l1_item_draws_do_not_depend_on_batch_split(sched, rng):
    from meldiff.forward import draw_noise_and_steps

    batch = _batch(rng, b=6, fixed=False)
    eps, t = draw_noise_and_steps(batch, sched, np.random.default_rng(4))
    eps2, t2 = draw_noise_and_steps(batch, sched, np.random.default_rng(4))
    assert np.array_equal(eps, eps2) and np.array_equal(t, t2)
    assert len(set(t.tolist())) > 1


def test_l1_frame_permutation_invariance(sched, rng):
    from meldiff.denoiser import ToyDenoiser, init_toy_params

    batch = _batch(rng, c=2, d=3, f=7)
    pred = ToyDenoiser(init_toy_params(2, 3, rng=rng))
    perm = rng.permutation(7)
    permuted = TrainingBatch(batch.x0[..., perm], batch.context[..., perm],
                             eps=batch.eps[..., perm], t=batch.t)
    assert l1_loss(pred, permuted, sched) == pytest.approx(l1_loss(pred, batch, sched), rel=1e-13)


def test_analytic_beats_zero_predictor(sched):
    gen = np.random.default_rng(1)
    spec = GaussianDataSpec([1.0], [0.5])
    x0 = spec.draw(None, (10_000, 1, 1), gen)
    batch = TrainingBatch(x0, np.zeros((10_000, 1, 1)), eps=gen.standard_normal(x0.shape),
                          t=gen.integers(1, 401, size=10_000))
    oracle = l1_loss(AnalyticGaussianDenoiser(spec, sched), batch, sched)
    zero = l1_loss(ZeroPredictor(), batch, sched)
    assert oracle < zero
