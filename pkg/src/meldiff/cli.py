"""Command line for schedules, sampling, toy training, benchmarks and verification.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""
import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import _kernels, io
from .bench import PAPER_GAMMAS, run_bench, to_csv
from .denoiser import (AnalyticGaussianDenoiser, GaussianDataSpec, ToyDenoiser, ZeroPredictor,
                       conditional_gaussian_dataset, default_conditional_spec, grad_check,
                       init_toy_params, sinusoid_dataset, toy_train)
from .forward import TrainingBatch
from .sampler import CHAIN_BLOCK, build_trajectory, sample
from .schedule import (DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_T, build_linear_schedule,
                       load as load_schedule, to_text)

OUTPUT_ENV = "MELDIFF_OUTPUT_DIR"
EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def default_output_dir():
    return Path(os.environ.get(OUTPUT_ENV, "meldiff-out"))


def _floats(text):
    return [float(v) for v in str(text).replace(",", " ").split()]


def _schedule_from(args):
    if getattr(args, "schedule", None):
        return load_schedule(args.schedule)
    return build_linear_schedule(args.T, args.beta_start, args.beta_end)


def _add_schedule_flags(p):
    p.add_argument("--T", type=int, default=DEFAULT_T)
    p.add_argument("--beta-start", type=float, default=DEFAULT_BETA_START)
    p.add_argument("--beta-end", type=float, default=DEFAULT_BETA_END)


# -- schedule ------------------------------------------------------------------

def cmd_schedule(args):
    text = to_text(build_linear_schedule(args.T, args.beta_start, args.beta_end))
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    return EXIT_OK


# -- sample --------------------------------------------------------------------

SAMPLE_KEYS = ("T", "beta_start", "beta_end", "schedule", "gamma", "eta", "seed", "chains",
               "channels", "frames", "predictor", "mu", "std", "params", "label", "workers")


def _apply_manifest(args):
    fields = io.read_manifest(args.from_manifest)
    if fields.get("command") != "sample":
        raise ValueError(f"{args.from_manifest} is not a sample manifest")
    for key in SAMPLE_KEYS:
        if key not in fields:
            continue
        current = getattr(args, key)
        raw = fields[key]
        if raw == "":
            setattr(args, key, None)
        elif isinstance(current, bool):
            setattr(args, key, raw == "True")
        elif isinstance(current, int):
            setattr(args, key, int(raw))
        elif isinstance(current, float):
            setattr(args, key, float(raw))
        else:
            setattr(args, key, raw)


def _build_predictor(args, schedule):
    """Predictor plus the context it expects (None when it ignores context)."""
    if args.predictor == "zero":
        return ZeroPredictor(), None
    if args.predictor == "analytic":
        mu, s = _floats(args.mu), _floats(args.std)
        mu = np.resize(mu, args.channels)
        s = np.resize(s, args.channels)
        return AnalyticGaussianDenoiser(GaussianDataSpec(mu, s), schedule), None
    if args.predictor == "toy":
        if not args.params:
            raise ValueError("--params is required for the toy predictor")
        params = io.load_toy_params(args.params)
        if params.channels != args.channels:
            raise ValueError(f"toy params expect {params.channels} channels, "
                             f"--channels is {args.channels}")
        label = int(args.label or 0)
        if not 0 <= label < params.context_dim:
            raise ValueError(f"label {label} outside [0, {params.context_dim})")
        context = np.zeros((params.context_dim, args.frames))
        context[label] = 1.0
        return ToyDenoiser(params), context
    raise ValueError(f"unknown predictor {args.predictor!r}")


def cmd_sample(args):
    if args.from_manifest:
        _apply_manifest(args)
    schedule = _schedule_from(args)
    spec = build_trajectory(schedule.num_steps, args.gamma, args.eta)
    predictor, context = _build_predictor(args, schedule)
    if args.chains < 1 or args.channels < 1 or args.frames < 1:
        raise ValueError("chains, channels and frames must be positive")
    start = time.perf_counter()
    out = sample(predictor, context, (args.chains, args.channels, args.frames), spec,
                 schedule, rng=args.seed, workers=args.workers)
    elapsed = time.perf_counter() - start
    out_dir = Path(args.out) if args.out else default_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(out):
        io.write_tensor(out_dir / f"chain_{i:05d}.mel", x)
    fields = {"command": "sample"}
    for key in SAMPLE_KEYS:
        value = getattr(args, key)
        fields[key] = "" if value is None else value
    fields.update(schedule_kind=schedule.kind, M=spec.M, chain_block=CHAIN_BLOCK,
                  backend=_kernels.backend(), wall_clock_sample_s=f"{elapsed:.6f}")
    io.write_manifest(out_dir / "manifest.txt", fields)
    print(f"wrote {len(out)} chains to {out_dir} (M={spec.M}, {elapsed:.3f}s)")
    return EXIT_OK


# -- train-toy -------------------------------------------------------------------

def cmd_train_toy(args):
    schedule = _schedule_from(args)
    rng = np.random.default_rng(args.seed)
    if args.dataset == "gaussian":
        spec = default_conditional_spec()
        data = conditional_gaussian_dataset(spec, args.items, args.frames, rng)
    else:
        data = sinusoid_dataset(args.items, args.channels, args.frames, rng=rng)
    params = init_toy_params(data.x0.shape[1], data.context.shape[1], rng=rng)
    start = time.perf_counter()
    params, losses = toy_train(params, data, schedule, args.steps, args.lr, rng=rng,
                               batch_size=args.batch_size)
    elapsed = time.perf_counter() - start
    out_dir = Path(args.out) if args.out else default_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    io.save_toy_params(out_dir / "toy_params", params)
    (out_dir / "losses.csv").write_text(
        "step,loss\n" + "".join(f"{i},{v:.8g}\n" for i, v in enumerate(losses)))
    io.write_manifest(out_dir / "train_manifest.txt", {
        "command": "train-toy", "dataset": args.dataset, "steps": args.steps, "lr": args.lr,
        "seed": args.seed, "batch_size": args.batch_size, "T": schedule.num_steps,
        "final_loss": f"{losses[-1]:.6g}", "wall_clock_train_s": f"{elapsed:.3f}"})
    print(f"trained {args.steps} steps, final loss {losses[-1]:.4f}; params in {out_dir}")
    return EXIT_OK


# -- bench -----------------------------------------------------------------------

def cmd_bench(args):
    schedule = _schedule_from(args)
    rows = run_bench(gammas=[int(g) for g in _floats(args.gammas)], repeats=args.repeats,
                     shape=(args.channels, args.frames), schedule=schedule, seed=args.seed)
    text = to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- verify / grad-check ---------------------------------------------------------

def cmd_verify(args):
    from .acceptance import format_report, run_all

    schedule = load_schedule(args.schedule) if args.schedule else None
    only = [int(v) for v in _floats(args.only)] if args.only else None
    results = run_all(seed=args.seed, schedule=schedule, only=only)
    sys.stdout.write(format_report(results, args.seed))
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_grad_check(args):
    schedule = _schedule_from(args)
    rng = np.random.default_rng(args.seed)
    spec = default_conditional_spec()
    data = conditional_gaussian_dataset(spec, 256, 8, rng)
    params = init_toy_params(spec.channels, spec.mu.shape[0], rng=rng)
    if args.train_steps:
        params, _ = toy_train(params, data, schedule, args.train_steps, rng=rng)
    batch = TrainingBatch(data.x0[:16], data.context[:16])
    err = grad_check(params, batch, schedule, perturbation=args.perturbation, rng=rng)
    ok = err < args.tolerance
    print(f"max_relative_error\t{err:.3e}\t{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(prog="meldiff", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("schedule", help="write a linear variance schedule")
    _add_schedule_flags(p)
    p.add_argument("--out", default="-", help="output path, '-' for stdout")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("sample", help="generate samples along a decimated trajectory")
    _add_schedule_flags(p)
    p.add_argument("--schedule", default=None, help="schedule file (overrides --T/--beta-*)")
    p.add_argument("--gamma", type=int, default=1)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--predictor", choices=("analytic", "toy", "zero"), default="analytic")
    p.add_argument("--mu", default="1.0", help="analytic data means, comma separated")
    p.add_argument("--std", default="0.5", help="analytic data stds, comma separated")
    p.add_argument("--params", default=None, help="toy parameter stem (no suffix)")
    p.add_argument("--label", type=int, default=None, help="context label for the toy predictor")
    p.add_argument("--workers", type=int, default=1, help="threads over chain blocks")
    p.add_argument("--out", default=None)
    p.add_argument("--from-manifest", default=None, help="rerun the run recorded in a manifest")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-toy", help="train the toy denoiser on a synthetic dataset")
    _add_schedule_flags(p)
    p.add_argument("--schedule", default=None)
    p.add_argument("--dataset", choices=("gaussian", "sinusoid"), default="gaussian")
    p.add_argument("--items", type=int, default=4096)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--channels", type=int, default=2, help="sinusoid dataset only")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="wall-clock scaling across decimation factors (CSV)")
    _add_schedule_flags(p)
    p.add_argument("--schedule", default=None)
    p.add_argument("--gammas", default=",".join(map(str, PAPER_GAMMAS)))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--channels", type=int, default=80)
    p.add_argument("--frames", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the acceptance criteria")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule", default=None)
    p.add_argument("--only", default=None, help="comma-separated criterion numbers")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("grad-check", help="finite-difference check of toy denoiser gradients")
    _add_schedule_flags(p)
    p.add_argument("--schedule", default=None)
    p.add_argument("--perturbation", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--train-steps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
