"""Step-count versus wall-clock scaling of the sampler across decimation factors."""
import csv
import io

import numpy as np

from .denoiser import AnalyticGaussianDenoiser, GaussianDataSpec
from .sampler import CountingPredictor, build_trajectory, sample
from .schedule import build_linear_schedule

PAPER_GAMMAS = (1, 7, 21, 57)
FIELDS = ("gamma", "M", "predictor_calls", "mean_s", "std_s", "speedup")


def default_predictor(channels, schedule):
    spec = GaussianDataSpec(np.zeros(channels), np.ones(channels))
    return AnalyticGaussianDenoiser(spec, schedule)


def run_bench(gammas=PAPER_GAMMAS, repeats=5, shape=(80, 400), predictor=None,
              schedule=None, context=None, eta=1.0, seed=0):
    """Time ``sample`` for each gamma; speedups are relative to the first gamma.

    One untimed warm-up run precedes the ``repeats`` timed runs. Timing covers
    the latent draw, predictor calls and step algebra only.
    """
    schedule = schedule or build_linear_schedule()
    predictor = predictor or default_predictor(shape[0], schedule)
    rows = []
    for gamma in gammas:
        spec = build_trajectory(schedule.num_steps, gamma, eta)
        counter = CountingPredictor(predictor)
        sample(counter, context, shape, spec, schedule, rng=seed)
        calls = counter.calls
        times = []
        for r in range(repeats):
            sample(predictor, context, shape, spec, schedule, rng=seed + 1 + r, timings=times)
        rows.append({"gamma": gamma, "M": spec.M, "predictor_calls": calls,
                     "mean_s": float(np.mean(times)), "std_s": float(np.std(times))})
    base = rows[0]["mean_s"]
    for row in rows:
        row["speedup"] = base / row["mean_s"]
    return rows


def to_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
