"""Variance schedules for the forward diffusion chain.

Indexing: step ``t`` runs 1..T and index 0 stands for the clean data, so every
table has length ``T + 1`` with ``betas[0] = 0`` and ``alpha_bars[0] = 1``.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_T = 400
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

# Rounding noise below this is clamped to zero in square-root radicands.
RADICAND_TOL = 1e-12


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = float("nan")
    beta_end: float = float("nan")
    kind: str = "linear"

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars):
            arr.flags.writeable = False

    @property
    def T(self):
        return self.num_steps

    def check_step(self, t, lo=1):
        if not lo <= int(t) <= self.num_steps:
            raise ScheduleError(f"step {t} outside [{lo}, {self.num_steps}]")
        return int(t)


def from_betas(betas, beta_start=None, beta_end=None, kind="linear"):
    """Build a schedule from the per-step betas for t = 1..T."""
    b = np.asarray(betas, dtype=np.float64)
    if b.ndim != 1 or b.size == 0:
        raise ScheduleError("betas must be a nonempty vector")
    if not np.all((b > 0) & (b < 1)):
        raise ScheduleError("every beta must lie in (0, 1)")
    betas_full = np.concatenate(([0.0], b))
    alphas = 1.0 - betas_full
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        num_steps=b.size,
        betas=betas_full,
        alphas=alphas,
        alpha_bars=alpha_bars,
        beta_start=float(b[0] if beta_start is None else beta_start),
        beta_end=float(b[-1] if beta_end is None else beta_end),
        kind=kind,
    )


def build_linear_schedule(T=DEFAULT_T, beta_start=DEFAULT_BETA_START, beta_end=DEFAULT_BETA_END):
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return from_betas(betas, beta_start, beta_end, kind="linear")


def sigma(schedule, t_prev, t, eta):
    """Noise scale for a reverse jump from step ``t`` to ``t_prev``.

    ``eta * sqrt((1 - abar[t_prev]) / (1 - abar[t]) * beta[t])``; with
    ``t_prev = t - 1`` this is the usual ancestral-sampling sigma.
    """
    t = schedule.check_step(t)
    t_prev = int(t_prev)
    if not 0 <= t_prev < t:
        raise ScheduleError(f"need 0 <= t_prev < t, got t_prev={t_prev}, t={t}")
    if eta < 0:
        raise ScheduleError(f"eta must be nonnegative, got {eta}")
    ab = schedule.alpha_bars
    ratio = (1.0 - ab[t_prev]) / (1.0 - ab[t])
    return float(eta) * float(np.sqrt(ratio * schedule.betas[t]))


def to_text(schedule):
    lines = [f"{schedule.num_steps} {schedule.beta_start!r} {schedule.beta_end!r} {schedule.kind}"]
    lines.extend(repr(float(b)) for b in schedule.betas[1:])
    return "\n".join(lines) + "\n"


def from_text(text):
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise ScheduleError("empty schedule file")
    head = lines[0].split()
    if len(head) != 4:
        raise ScheduleError(f"bad schedule header: {lines[0]!r}")
    try:
        T = int(head[0])
        beta_start, beta_end = float(head[1]), float(head[2])
        betas = [float(x) for x in lines[1:]]
    except ValueError as exc:
        raise ScheduleError(f"unparsable schedule file: {exc}") from None
    if len(betas) != T:
        raise ScheduleError(f"header says T={T} but file holds {len(betas)} betas")
    return from_betas(betas, beta_start, beta_end, kind=head[3])


def save(schedule, path):
    Path(path).write_text(to_text(schedule))


def load(path):
    return from_text(Path(path).read_text())
