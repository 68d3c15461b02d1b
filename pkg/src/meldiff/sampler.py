"""Reverse-process sampling: ancestral steps and decimated trajectories.

Temperature ``eta`` multiplies the standard deviation of both the starting
latent ``x_T`` and the per-step noise.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import time

import numpy as np

from . import _kernels
from .rng import make_rng, spawn
from .schedule import RADICAND_TOL, ScheduleError, sigma

# Chains are generated in fixed-size blocks, one child stream per block, so
# the output does not depend on the worker count.
CHAIN_BLOCK = 256


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectorySpec:
    tau: tuple
    gamma: int
    eta: float

    @property
    def M(self):
        return len(self.tau)


def build_trajectory(T, gamma, eta=1.0):
    """Every ``gamma``-th step starting at 1, with T always included."""
    T, gamma = int(T), int(gamma)
    if T < 1:
        raise TrajectoryError(f"T must be positive, got {T}")
    if not 1 <= gamma <= T:
        raise TrajectoryError(f"gamma must lie in [1, T={T}], got {gamma}")
    if eta < 0:
        raise TrajectoryError(f"eta must be nonnegative, got {eta}")
    tau = list(range(1, T + 1, gamma))
    if tau[-1] != T:
        tau.append(T)
    return TrajectorySpec(tau=tuple(tau), gamma=gamma, eta=float(eta))


def _sqrt_radicand(r):
    if r < 0:
        if r < -RADICAND_TOL:
            raise TrajectoryError(
                f"negative radicand {r:.3e}: eta too large for this trajectory")
        return 0.0
    return float(np.sqrt(r))


def ddpm_coefficients(schedule, t, eta):
    """(a, b, c) with x_{t-1} = a*x_t + b*eps_hat + c*z."""
    t = schedule.check_step(t)
    alpha = schedule.alphas[t]
    ab = schedule.alpha_bars[t]
    inv = 1.0 / np.sqrt(alpha)
    k = (1.0 - alpha) / np.sqrt(1.0 - ab)
    return inv, -k * inv, sigma(schedule, t - 1, t, eta)


def accelerated_coefficients(schedule, t_prev, t, eta):
    """(a, b, c) for the jump x_t -> x_{t_prev} along a decimated path."""
    s = sigma(schedule, t_prev, t, eta)
    ab = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev]
    root_prev = np.sqrt(ab_prev)
    a = root_prev / np.sqrt(ab)
    direction = _sqrt_radicand(1.0 - ab_prev - s * s)
    b = -a * np.sqrt(1.0 - ab) + direction
    return float(a), float(b), s


def final_coefficients(schedule, t):
    ab = schedule.alpha_bars[schedule.check_step(t)]
    inv = 1.0 / np.sqrt(ab)
    return inv, -np.sqrt(1.0 - ab) * inv


def _check_shapes(*arrays):
    shape = np.shape(arrays[0])
    for a in arrays[1:]:
        if np.shape(a) != shape:
            raise ValueError(f"shape mismatch: {shape} vs {np.shape(a)}")


def _combine(x, eps_hat, z, a, b, c):
    x = np.ascontiguousarray(x, dtype=np.float64)
    eps_hat = np.ascontiguousarray(eps_hat, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    return _kernels.affine3(x, eps_hat, z, a, b, c)


def ddpm_step(x_t, t, eps_hat, z, schedule, eta=1.0):
    """Ancestral step t -> t-1; at t = 1 the noise term vanishes."""
    _check_shapes(x_t, eps_hat, z)
    a, b, c = ddpm_coefficients(schedule, t, eta)
    return _combine(x_t, eps_hat, z, a, b, c)


def accelerated_step(x_cur, i, spec, eps_hat, z, schedule):
    """Jump from tau[i] to tau[i-1]; ``i`` is the 1-based path position, i >= 2."""
    if not 2 <= i <= spec.M:
        raise TrajectoryError(f"trajectory position {i} outside [2, {spec.M}]")
    _check_shapes(x_cur, eps_hat, z)
    a, b, c = accelerated_coefficients(schedule, spec.tau[i - 2], spec.tau[i - 1], spec.eta)
    return _combine(x_cur, eps_hat, z, a, b, c)


def final_step(x_tau1, spec, eps_hat, schedule):
    """Predicted clean sample from x at tau[0]."""
    _check_shapes(x_tau1, eps_hat)
    a, b = final_coefficients(schedule, spec.tau[0])
    return a * np.asarray(x_tau1, dtype=np.float64) + b * np.asarray(eps_hat, dtype=np.float64)


def validate_trajectory(spec, schedule):
    if spec.tau[-1] != schedule.num_steps:
        raise TrajectoryError(
            f"trajectory ends at {spec.tau[-1]} but schedule has T={schedule.num_steps}")
    if any(b <= a for a, b in zip(spec.tau, spec.tau[1:])) or spec.tau[0] < 1:
        raise TrajectoryError("tau must be strictly increasing from >= 1")
    return [accelerated_coefficients(schedule, spec.tau[i - 1], spec.tau[i], spec.eta)
            for i in range(1, spec.M)]


class CountingPredictor:
    """Wraps a predictor and counts ``predict`` calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def predict(self, x_t, t, context):
        self.calls += 1
        return self.inner.predict(x_t, t, context)


def _run_block(predictor, context, shape, spec, schedule, coefs, rng, timer=None):
    start = time.perf_counter()
    x = spec.eta * rng.standard_normal(shape)
    for i in range(spec.M, 1, -1):
        t = spec.tau[i - 1]
        eps_hat = predictor.predict(x, t, context)
        z = rng.standard_normal(shape)
        a, b, c = coefs[i - 2]
        x = _combine(x, eps_hat, z, a, b, c)
    eps_hat = predictor.predict(x, spec.tau[0], context)
    x = final_step(x, spec, eps_hat, schedule)
    if timer is not None:
        timer.append(time.perf_counter() - start)
    return x


def chain_streams(rng, n_chains, block=CHAIN_BLOCK):
    """Child streams for each block of ``block`` chains, in order."""
    n_blocks = -(-n_chains // block)
    return spawn(rng, n_blocks)


def sample(predictor, context, shape, spec, schedule, rng=None, workers=1, timings=None):
    """Generate samples along ``spec``.

    ``shape`` is ``(C, F)`` for one chain or ``(N, C, F)`` for N chains. Chains
    are processed in blocks of ``CHAIN_BLOCK``, each with its own child stream
    of ``rng``; ``workers > 1`` runs blocks on a thread pool without changing
    the result.
    """
    coefs = validate_trajectory(spec, schedule)
    single = len(shape) == 2
    shape = (1,) + tuple(shape) if single else tuple(shape)
    n = shape[0]
    if context is not None and np.shape(context)[-1] != shape[-1]:
        raise ValueError(
            f"context has {np.shape(context)[-1]} frames, requested {shape[-1]}")
    streams = chain_streams(make_rng(rng), n)
    bounds = [(k * CHAIN_BLOCK, min(n, (k + 1) * CHAIN_BLOCK)) for k in range(len(streams))]

    def run(k):
        lo, hi = bounds[k]
        return _run_block(predictor, context, (hi - lo,) + shape[1:], spec, schedule,
                          coefs, streams[k], timings)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(bounds))))
    else:
        parts = [run(k) for k in range(len(bounds))]
    out = np.concatenate(parts, axis=0)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("sampler produced non-finite values")
    return out[0] if single else out
