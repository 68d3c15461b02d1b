"""Forward (noising) diffusion and the L1 noise-prediction objective.

Sample tensors are float arrays shaped ``[channels, frames]``; any number of
leading batch axes is allowed and carried through unchanged.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .rng import make_rng, spawn
from .schedule import ScheduleError


@dataclass
class TrainingBatch:
    """Items stacked on axis 0.

    x0:      [B, C, F] clean targets
    context: [B, D, F] frame-aligned conditioning
    eps, t:  optional fixed noise [B, C, F] and steps [B] for deterministic runs
    """

    x0: np.ndarray
    context: np.ndarray
    eps: Optional[np.ndarray] = None
    t: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.x0.ndim != 3 or self.context.ndim != 3:
            raise ValueError("x0 and context must be [B, C, F] / [B, D, F]")
        if self.context.shape[0] != self.x0.shape[0] or self.context.shape[2] != self.x0.shape[2]:
            raise ValueError(
                f"context {self.context.shape} not aligned with x0 {self.x0.shape}")
        if self.eps is not None and self.eps.shape != self.x0.shape:
            raise ValueError("eps must match x0 shape")
        if self.t is not None:
            self.t = np.asarray(self.t, dtype=np.int64).reshape(-1)
            if self.t.size != self.x0.shape[0]:
                raise ValueError("need one step index per batch item")

    def __len__(self):
        return self.x0.shape[0]


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def diffuse_step(x_prev, t, schedule, rng):
    """One Markov transition x_{t-1} -> x_t with variance beta_t."""
    t = schedule.check_step(t)
    rng = make_rng(rng)
    beta = schedule.betas[t]
    w = rng.standard_normal(np.shape(x_prev))
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * w


def diffuse_chain(x0, t, schedule, rng):
    """Apply ``diffuse_step`` for steps 1..t, one stream draw per step."""
    rng = make_rng(rng)
    x = np.asarray(x0, dtype=np.float64)
    for s in range(1, schedule.check_step(t) + 1):
        x = diffuse_step(x, s, schedule, rng)
    return x


def _coefs(schedule, t):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.num_steps):
        raise ScheduleError(f"step index outside [1, {schedule.num_steps}]")
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab), np.sqrt(1.0 - ab)


def _expand(v, ndim):
    v = np.asarray(v)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim))


def q_sample(x0, t, epsilon, schedule):
    """Closed-form jump to step t: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    ``t`` is a scalar or one index per leading batch item.
    """
    x0 = np.asarray(x0)
    epsilon = np.asarray(epsilon)
    if x0.shape != epsilon.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs epsilon {epsilon.shape}")
    a, b = _coefs(schedule, t)
    return _expand(a, x0.ndim) * x0 + _expand(b, x0.ndim) * epsilon


def draw_noise_and_steps(batch, schedule, rng):
    """Per-item uniform steps in 1..T and standard-normal noise.

    Each item draws from its own child stream so that splitting a batch does
    not change any item's draws.
    """
    if batch.eps is not None and batch.t is not None:
        return batch.eps, batch.t
    children = spawn(rng, len(batch))
    t = np.empty(len(batch), dtype=np.int64)
    eps = np.empty(batch.x0.shape)
    for i, child in enumerate(children):
        t[i] = child.integers(1, schedule.num_steps + 1)
        eps[i] = child.standard_normal(batch.x0.shape[1:])
    if batch.t is not None:
        t = batch.t
    if batch.eps is not None:
        eps = batch.eps
    return eps, t


def l1_loss(predictor, batch, schedule, rng=None):
    """Mean absolute error between injected and predicted noise."""
    eps, t = draw_noise_and_steps(batch, schedule, rng)
    x_t = q_sample(batch.x0, t, eps, schedule)
    eps_hat = predictor.predict(x_t, t, batch.context)
    if eps_hat.shape != eps.shape:
        raise ValueError(f"predictor returned {eps_hat.shape}, expected {eps.shape}")
    loss = float(np.mean(np.abs(eps - eps_hat)))
    _check_finite(loss, "l1 loss")
    return loss
