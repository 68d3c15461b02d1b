"""Noise predictors: the closed-form Gaussian oracle and a small trainable MLP.

Every predictor exposes ``predict(x_t, t, context)`` where ``x_t`` is
``[..., C, F]``, ``t`` is a scalar step or one step per leading item, and
``context`` is ``[D, F]`` (shared) or ``[..., D, F]``.
"""
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .embedding import step_embedding
from .forward import TrainingBatch, q_sample
from .rng import make_rng


class EpsilonPredictor(Protocol):
    def predict(self, x_t, t, context): ...


class ZeroPredictor:
    def predict(self, x_t, t, context):
        return np.zeros(np.shape(x_t))


def _steps_like(t, x):
    """Broadcastable step array for x of shape [..., C, F]."""
    t = np.asarray(t)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (np.ndim(x) - t.ndim))


# -- Gaussian data and its exact denoiser ------------------------------------

@dataclass(frozen=True)
class GaussianDataSpec:
    """Independent per-channel Gaussians, or one row per context label.

    ``mu`` and ``s`` are ``[C]`` (unconditional) or ``[K, C]`` (label-keyed,
    selected per frame through a one-hot context ``[K, F]``).
    """

    mu: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        s = np.atleast_1d(np.asarray(self.s, dtype=np.float64))
        if mu.shape != s.shape:
            raise ValueError("mu and s must share a shape")
        if not np.all(s > 0):
            raise ValueError("standard deviations must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "s", s)

    @property
    def conditional(self):
        return self.mu.ndim == 2

    @property
    def channels(self):
        return self.mu.shape[-1]

    def frame_params(self, context, frames):
        """Per-frame (mu, s), each ``[..., C, F]``-broadcastable."""
        if not self.conditional:
            return self.mu[:, None], self.s[:, None]
        context = np.asarray(context, dtype=np.float64)
        # [K, C]^T @ [..., K, F] -> [..., C, F]
        mu = np.einsum("kc,...kf->...cf", self.mu, context)
        s = np.einsum("kc,...kf->...cf", self.s, context)
        return mu, s

    def draw(self, context, shape, rng):
        mu, s = self.frame_params(context, shape[-1])
        return mu + s * make_rng(rng).standard_normal(shape)


def analytic_predict(spec, x_t, t, schedule, context=None):
    """Posterior-mean noise E[eps | x_t] for Gaussian data."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.num_steps):
        raise ValueError(f"step outside [1, {schedule.num_steps}]")
    x_t = np.asarray(x_t, dtype=np.float64)
    ab = schedule.alpha_bars[_steps_like(t, x_t)]
    mu, s = spec.frame_params(context, x_t.shape[-1])
    var = s * s
    root = np.sqrt(ab)
    m = (root * var * x_t + (1.0 - ab) * mu) / (ab * var + 1.0 - ab)
    return (x_t - root * m) / np.sqrt(1.0 - ab)


class AnalyticGaussianDenoiser:
    def __init__(self, spec, schedule):
        self.spec = spec
        self.schedule = schedule

    def predict(self, x_t, t, context):
        return analytic_predict(self.spec, x_t, t, self.schedule, context)


# -- toy feed-forward denoiser ----------------------------------------------

def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class ToyDenoiserParams:
    """Per-frame MLP over [x_t channels | step embedding | context features].

    ``weights[i]`` is ``[in, out]``; softplus between layers, linear output.
    """

    channels: int
    context_dim: int
    emb_dim: int
    weights: list
    biases: list
    hidden: int = 64

    @property
    def in_dim(self):
        return self.channels + self.emb_dim + self.context_dim

    def copy(self):
        return ToyDenoiserParams(self.channels, self.context_dim, self.emb_dim,
                                 [w.copy() for w in self.weights],
                                 [b.copy() for b in self.biases], self.hidden)

    def arrays(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, theta):
        pos = 0
        for a in self.arrays():
            a[...] = theta[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    @property
    def size(self):
        return sum(a.size for a in self.arrays())


def init_toy_params(channels, context_dim, hidden=64, layers=3, emb_dim=32, rng=None):
    rng = make_rng(rng)
    dims = [channels + emb_dim + context_dim] + [hidden] * layers + [channels]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(1.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return ToyDenoiserParams(channels, context_dim, emb_dim, weights, biases, hidden)


def _features(params, x_t, t, context):
    x_t = np.asarray(x_t, dtype=np.float64)
    lead = x_t.shape[:-2]
    c, frames = x_t.shape[-2:]
    if c != params.channels:
        raise ValueError(f"expected {params.channels} channels, got {c}")
    context = np.asarray(context, dtype=np.float64)
    if context.shape[-2] != params.context_dim or context.shape[-1] != frames:
        raise ValueError(
            f"context {context.shape} does not fit [{params.context_dim}, {frames}]")
    context = np.broadcast_to(context, lead + context.shape[-2:])
    emb = step_embedding(np.broadcast_to(np.asarray(t), lead), params.emb_dim)
    emb = np.broadcast_to(emb[..., None, :], lead + (frames, params.emb_dim))
    feats = np.concatenate([np.swapaxes(x_t, -1, -2), emb, np.swapaxes(context, -1, -2)], axis=-1)
    return feats.reshape(-1, params.in_dim)


def _forward(params, rows):
    acts = [rows]
    pre = []
    h = rows
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _softplus(z)
        acts.append(h)
    return h, pre, acts


def _backward(params, pre, acts, grad_out):
    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    g = grad_out
    for i in range(len(params.weights) - 1, -1, -1):
        if i != len(params.weights) - 1:
            g = g * _sigmoid(pre[i])
        gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i:
            g = g @ params.weights[i].T
    return gw, gb


def toy_predict(params, x_t, t, context):
    x_t = np.asarray(x_t, dtype=np.float64)
    out, _, _ = _forward(params, _features(params, x_t, t, context))
    frames = x_t.shape[-1]
    out = out.reshape(x_t.shape[:-2] + (frames, params.channels))
    return np.swapaxes(out, -1, -2)


class ToyDenoiser:
    def __init__(self, params):
        self.params = params

    def predict(self, x_t, t, context):
        return toy_predict(self.params, x_t, t, context)


def toy_loss_and_grads(params, x0, context, eps, t, schedule, skip_below=0.0):
    """L1 loss at fixed (eps, t) and its parameter gradients.

    Residuals with magnitude below ``skip_below`` are dropped from both the
    loss and the gradient (the L1 kink); the subgradient at exactly zero is 0.
    """
    x_t = q_sample(x0, t, eps, schedule)
    rows = _features(params, x_t, t, context)
    out, pre, acts = _forward(params, rows)
    target = np.swapaxes(eps, -1, -2).reshape(out.shape)
    resid = out - target
    n = resid.size
    mask = np.abs(resid) >= skip_below if skip_below > 0 else None
    if mask is not None:
        resid = np.where(mask, resid, 0.0)
    loss = float(np.abs(resid).sum() / n)
    gw, gb = _backward(params, pre, acts, np.sign(resid) / n)
    return loss, gw, gb


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.k = 0

    def update(self, theta, grad):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.k += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.k)
        v_hat = self.v / (1 - self.beta2 ** self.k)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _flat_grads(gw, gb):
    out = []
    for w, b in zip(gw, gb):
        out += [w.ravel(), b.ravel()]
    return np.concatenate(out)


@dataclass
class Dataset:
    """A pool of clean targets [N, C, F] with aligned context [N, D, F]."""

    x0: np.ndarray
    context: np.ndarray
    data_spec: GaussianDataSpec = None
    labels: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.x0.shape[0]


def conditional_gaussian_dataset(spec, n_items, frames, rng):
    """Each frame gets a random label; context is its one-hot code."""
    rng = make_rng(rng)
    k = spec.mu.shape[0]
    labels = rng.integers(0, k, size=(n_items, frames))
    context = np.zeros((n_items, k, frames))
    np.put_along_axis(context, labels[:, None, :], 1.0, axis=1)
    x0 = spec.draw(context, (n_items, spec.channels, frames), rng)
    return Dataset(x0, context, spec, labels)


def sinusoid_dataset(n_items, channels, frames, n_patterns=3, rng=None):
    """Deterministic frame sinusoids whose frequency is chosen by the context label.

    Context rows: one-hot label followed by the normalized frame position.
    """
    rng = make_rng(rng)
    labels = rng.integers(0, n_patterns, size=n_items)
    pos = np.arange(frames) / max(frames - 1, 1)
    context = np.zeros((n_items, n_patterns + 1, frames))
    context[np.arange(n_items), labels, :] = 1.0
    context[:, -1, :] = pos
    freq = 1.0 + labels[:, None, None]
    phase = np.arange(channels)[None, :, None] * 0.5
    x0 = np.sin(2 * np.pi * freq * pos[None, None, :] + phase)
    return Dataset(x0, context, None, labels)


def toy_train(params, dataset, schedule, steps, learning_rate=1e-3, rng=None, batch_size=64,
              optimizer=None):
    """Adam on the L1 noise objective; returns (params, per-step losses)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    rng = make_rng(rng)
    params = params.copy()
    opt = optimizer or Adam(lr=learning_rate)
    theta = params.flat()
    losses = np.empty(steps)
    for k in range(steps):
        idx = rng.integers(0, len(dataset), size=batch_size)
        x0 = dataset.x0[idx]
        ctx = dataset.context[idx]
        t = rng.integers(1, schedule.num_steps + 1, size=batch_size)
        eps = rng.standard_normal(x0.shape)
        loss, gw, gb = toy_loss_and_grads(params, x0, ctx, eps, t, schedule)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {k}")
        losses[k] = loss
        if learning_rate:
            theta = opt.update(theta, _flat_grads(gw, gb))
            params.set_flat(theta)
    return params, losses


def smoothed(losses, window=200):
    window = min(window, len(losses))
    return float(np.mean(losses[-window:]))


def evaluation_batch(dataset, schedule, rng):
    """Fix (eps, t) per item so losses are comparable across predictors."""
    rng = make_rng(rng)
    t = rng.integers(1, schedule.num_steps + 1, size=len(dataset))
    eps = rng.standard_normal(dataset.x0.shape)
    return TrainingBatch(dataset.x0, dataset.context, eps=eps, t=t)


# -- gradient checking ------------------------------------------------------

def relative_error(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_gradients(loss_fn, grad, theta, indices, perturbation=1e-5, floor=1e-7):
    """Worst relative error between ``grad[indices]`` and central differences."""
    theta = np.array(theta, dtype=np.float64)
    numeric = np.empty(len(indices))
    for j, i in enumerate(indices):
        old = theta[i]
        theta[i] = old + perturbation
        up = loss_fn(theta)
        theta[i] = old - perturbation
        down = loss_fn(theta)
        theta[i] = old
        numeric[j] = (up - down) / (2 * perturbation)
    return float(np.max(relative_error(grad[indices], numeric, floor)))


def grad_check(params, batch, schedule, perturbation=1e-5, n_checks=256, rng=None,
               skip_below=1e-6):
    """Compare toy-denoiser gradients against central differences on a random
    subset of at least 200 parameters; returns the worst relative error."""
    rng = make_rng(rng)
    if batch.eps is None or batch.t is None:
        eps = rng.standard_normal(batch.x0.shape)
        t = rng.integers(1, schedule.num_steps + 1, size=len(batch))
        batch = TrainingBatch(batch.x0, batch.context, eps=eps, t=t)
    work = params.copy()
    theta0 = work.flat()
    _, gw, gb = toy_loss_and_grads(work, batch.x0, batch.context, batch.eps, batch.t,
                                   schedule, skip_below)
    grad = _flat_grads(gw, gb)
    # Freeze the set of skipped residuals at the unperturbed point.
    x_t = q_sample(batch.x0, batch.t, batch.eps, schedule)
    resid = toy_predict(work, x_t, batch.t, batch.context) - batch.eps
    keep = np.abs(resid) >= skip_below
    n = resid.size

    def loss_fn(theta):
        work.set_flat(theta)
        r = toy_predict(work, x_t, batch.t, batch.context) - batch.eps
        return float(np.abs(np.where(keep, r, 0.0)).sum() / n)

    n_checks = max(200, min(n_checks, theta0.size)) if theta0.size >= 200 else theta0.size
    idx = rng.choice(theta0.size, size=n_checks, replace=False)
    try:
        return check_gradients(loss_fn, grad, theta0, idx, perturbation)
    finally:
        work.set_flat(theta0)


def default_conditional_spec():
    """Three labels over two channels; the dataset behind the training check."""
    return GaussianDataSpec(mu=[[1.0, -0.5], [-1.0, 0.5], [0.3, 1.5]],
                            s=[[0.5, 0.3], [0.3, 0.6], [0.8, 0.4]])
