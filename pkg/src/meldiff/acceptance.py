"""Exit criteria for the package, runnable from pytest or ``meldiff verify``.

Each criterion returns a :class:`Result`; a criterion passes only if its
numerical check holds and it finished inside its time budget.
"""
from contextlib import redirect_stdout
from dataclasses import dataclass
import io
import tempfile
import time
from pathlib import Path

import numpy as np

from . import ttsnet
from .bench import run_bench
from .denoiser import (AnalyticGaussianDenoiser, GaussianDataSpec, ToyDenoiser, ZeroPredictor,
                       conditional_gaussian_dataset, default_conditional_spec,
                       evaluation_batch, grad_check, init_toy_params, smoothed, toy_train)
from .embedding import step_embedding
from .forward import TrainingBatch, l1_loss, q_sample
from .sampler import (TrajectorySpec, accelerated_step, build_trajectory, ddpm_step, final_step,
                      sample)
from .schedule import build_linear_schedule

TARGET_MU, TARGET_S = 1.0, 0.5


@dataclass
class Result:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    budget: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{self.number}\t{self.name}\t{status}\t{self.seconds:.2f}s/{self.budget:g}s\t{self.detail}"


def _moments_check(schedule, gamma, seed, mean_tol, std_rel_tol, chains=10_000):
    spec = GaussianDataSpec([TARGET_MU], [TARGET_S])
    pred = AnalyticGaussianDenoiser(spec, schedule)
    out = sample(pred, None, (chains, 1, 1), build_trajectory(schedule.num_steps, gamma, 1.0),
                 schedule, rng=seed).ravel()
    mean, std = out.mean(), out.std(ddof=1)
    mean_err = abs(mean - TARGET_MU)
    std_err = abs(std - TARGET_S) / TARGET_S
    ok = mean_err <= mean_tol and std_err <= std_rel_tol
    return ok, (f"mean={mean:.4f} (|err| {mean_err:.4f} <= {mean_tol}) "
                f"std={std:.4f} (rel err {std_err:.3f} <= {std_rel_tol})")


def sampler_equivalence(schedule, seed):
    rng = np.random.default_rng(seed)
    T = schedule.num_steps
    spec = build_trajectory(T, 1, 1.0)
    worst = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 7)))
        t = int(rng.integers(2, T + 1))
        x, e, z = (rng.standard_normal(shape) * rng.uniform(0.1, 3) for _ in range(3))
        diff = accelerated_step(x, t, spec, e, z, schedule) - ddpm_step(x, t, e, z, schedule, 1.0)
        worst = max(worst, float(np.max(np.abs(diff))))
    return worst <= 1e-10, f"max |accelerated - ddpm| = {worst:.2e} <= 1e-10"


def reconstruction_identity(schedule, seed):
    rng = np.random.default_rng(seed)
    T = schedule.num_steps
    worst = 0.0
    for _ in range(1000):
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 7)))
        t = int(rng.integers(1, T + 1))
        x0 = rng.standard_normal(shape) * rng.uniform(0.1, 10)
        eps = rng.standard_normal(shape)
        spec = TrajectorySpec(tau=(t,) if t == T else (t, T), gamma=1, eta=1.0)
        rec = final_step(q_sample(x0, t, eps, schedule), spec, eps, schedule)
        worst = max(worst, float(np.max(np.abs(rec - x0)) / np.max(np.abs(x0))))
    return worst <= 1e-6, f"max relative reconstruction error = {worst:.2e} <= 1e-6"


def gaussian_oracle_full(schedule, seed):
    return _moments_check(schedule, 1, seed, 0.03, 0.05)


def gaussian_oracle_accelerated(schedule, seed):
    return _moments_check(schedule, 57, seed, 0.06, 0.10)


def speed_scaling(schedule, seed):
    rows = run_bench(gammas=(1, 7, 21, 57), repeats=5, shape=(80, 400), schedule=schedule,
                     seed=seed)
    calls = [r["predictor_calls"] for r in rows]
    speedups = [r["speedup"] for r in rows]
    ok = calls == [400, 58, 20, 8] and speedups[-1] >= 25.0
    return ok, (f"calls={calls} (want [400, 58, 20, 8]) "
                f"speedups={[round(s, 1) for s in speedups]} (gamma=57 >= 25)")


def temperature_monotonicity(schedule, seed):
    spec = GaussianDataSpec([TARGET_MU], [TARGET_S])
    pred = AnalyticGaussianDenoiser(spec, schedule)
    variances = []
    for eta in (0.0, 0.2, 0.6, 1.0):
        traj = build_trajectory(schedule.num_steps, 1, eta)
        out = sample(pred, None, (1000, 1, 1), traj, schedule, rng=seed).ravel()
        # identical values can still give a ~1e-32 float variance
        variances.append(0.0 if np.all(out == out[0]) else float(out.var()))
    traj0 = build_trajectory(schedule.num_steps, 1, 0.0)
    cold = [sample(pred, None, (4, 1, 1), traj0, schedule, rng=seed + k) for k in range(3)]
    same = all(np.array_equal(cold[0], c) for c in cold[1:])
    monotone = all(b >= a for a, b in zip(variances, variances[1:]))
    ok = monotone and variances[0] == 0.0 and same
    return ok, (f"var over eta 0/0.2/0.6/1 = {[f'{v:.4f}' for v in variances]}, "
                f"eta=0 identical across seeds: {same}")


def gradient_correctness(schedule, seed):
    rng = np.random.default_rng(seed)
    spec = default_conditional_spec()
    data = conditional_gaussian_dataset(spec, 256, 8, rng)
    params = init_toy_params(spec.channels, spec.mu.shape[0], rng=rng)
    params, _ = toy_train(params, data, schedule, 200, rng=rng)
    batch = TrainingBatch(data.x0[:16], data.context[:16])
    err = grad_check(params, batch, schedule, perturbation=1e-5, rng=rng)
    return err < 1e-4, f"max relative gradient error = {err:.2e} < 1e-4"


def toy_training(schedule, seed):
    rng = np.random.default_rng(seed)
    spec = default_conditional_spec()
    train = conditional_gaussian_dataset(spec, 4096, 8, rng)
    held = conditional_gaussian_dataset(spec, 1024, 8, rng)
    batch = evaluation_batch(held, schedule, rng)
    params = init_toy_params(spec.channels, spec.mu.shape[0], rng=rng)
    params, losses = toy_train(params, train, schedule, 2000, 1e-3, rng=rng)
    oracle = l1_loss(AnalyticGaussianDenoiser(spec, schedule), batch, schedule)
    toy = l1_loss(ToyDenoiser(params), batch, schedule)
    zero = l1_loss(ZeroPredictor(), batch, schedule)
    train_smooth = smoothed(losses)
    ok = max(toy, train_smooth) <= 1.25 * oracle and oracle <= toy and oracle <= zero
    return ok, (f"held-out toy={toy:.4f} smoothed train={train_smooth:.4f} "
                f"oracle={oracle:.4f} (limit {1.25 * oracle:.4f}) zero={zero:.4f}")


def architecture_invariants(schedule, seed):
    rng = np.random.default_rng(seed)
    notes = []

    lr_ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        emb = rng.standard_normal((int(rng.integers(1, 6)), n))
        dur = rng.integers(0, 5, size=n)
        if dur.sum() == 0:
            dur[0] = 1
        cols = [emb[:, i] for i in range(n) for _ in range(dur[i])]
        lr_ok &= np.array_equal(ttsnet.length_regulate(emb, dur), np.stack(cols, axis=1))
    notes.append(f"length regulator {'ok' if lr_ok else 'MISMATCH'}")

    cfg = ttsnet.DESK
    net = ttsnet.TTSNet.init(cfg, rng)
    ids = rng.integers(0, cfg.vocab_size, size=9)
    zenc = ttsnet.zero_weights(net.encoder)
    zenc["embedding"] = net.encoder["embedding"]
    zenc["prenet_w"], zenc["prenet_b"] = net.encoder["prenet_w"], net.encoder["prenet_b"]
    pre = ttsnet.prenet(ids, zenc)
    expected = ttsnet.layer_norm(pre, zenc["final_ln_g"], zenc["final_ln_b"])
    enc_ok = np.allclose(ttsnet.encode_text(ids, zenc, cfg), expected, atol=1e-12)
    x = rng.standard_normal((cfg.residual_channels, 11))
    ctx = rng.standard_normal((cfg.d_model, 11))
    step_vec = rng.standard_normal(cfg.residual_channels)
    dec_ok = True
    for blk in net.decoder["blocks"]:
        zb = ttsnet.zero_weights(blk)
        zb["out_b"][cfg.residual_channels:] = blk["out_b"][cfg.residual_channels:] + 0.25
        res, skip = ttsnet.decoder_block(x, ctx, step_vec, zb)
        dec_ok &= np.array_equal(res, x) and np.allclose(skip, zb["out_b"][cfg.residual_channels:, None])
    notes.append(f"residual identity encoder={enc_ok} decoder={dec_ok}")

    codes = step_embedding(np.arange(1, schedule.num_steps + 1), 128)
    gaps = np.max(np.abs(codes[:, None, :] - codes[None, :, :]), axis=-1)
    np.fill_diagonal(gaps, np.inf)
    min_gap = float(gaps.min())
    notes.append(f"step-code min L-inf gap={min_gap:.3g}")

    encs, durs = [], []
    for _ in range(50):
        n = int(rng.integers(4, 13))
        encs.append(ttsnet.encode_text(rng.integers(0, cfg.vocab_size, n), net.encoder, cfg))
        durs.append(rng.integers(0, 9, size=n))
    trained, _ = ttsnet.train_duration_predictor(net.durations, encs, durs, steps=500)
    hits = sum(int(np.sum(ttsnet.durations_from_log(ttsnet.predict_durations(e, trained)) == d))
               for e, d in zip(encs, durs))
    total = sum(len(d) for d in durs)
    notes.append(f"duration recovery {hits}/{total}")
    ok = lr_ok and enc_ok and dec_ok and min_gap > 1e-6 and hits == total
    return ok, "; ".join(notes)


def cli_determinism(schedule, seed):
    from .cli import main

    args = ["sample", "--T", str(schedule.num_steps), "--gamma", "7", "--eta", "1.0",
            "--seed", str(seed), "--chains", "600", "--channels", "2", "--frames", "3"]
    with tempfile.TemporaryDirectory() as tmp:
        dirs = []
        for k, workers in enumerate((1, 1, 4)):
            d = Path(tmp) / f"run{k}"
            with redirect_stdout(io.StringIO()):
                code = main(args + ["--out", str(d), "--workers", str(workers)])
            if code != 0:
                return False, "sample command failed"
            dirs.append(d)
        replay = Path(tmp) / "replay"
        with redirect_stdout(io.StringIO()):
            main(["sample", "--from-manifest", str(dirs[0] / "manifest.txt"), "--out", str(replay)])
        dirs.append(replay)
        names = sorted(p.name for p in dirs[0].glob("*.mel"))
        identical = all(
            sorted(p.name for p in d.glob("*.mel")) == names
            and all((d / n).read_bytes() == (dirs[0] / n).read_bytes() for n in names)
            for d in dirs[1:])
    return identical and len(names) == 600, (
        f"{len(names)} chain files byte-identical across repeat, 4 workers, manifest replay: "
        f"{identical}")


CRITERIA = [
    (1, "sampler equivalence", sampler_equivalence, 5),
    (2, "reconstruction identity", reconstruction_identity, 5),
    (3, "gaussian oracle gamma=1", gaussian_oracle_full, 120),
    (4, "gaussian oracle gamma=57", gaussian_oracle_accelerated, 5),
    (5, "speed scaling", speed_scaling, 180),
    (6, "temperature monotonicity", temperature_monotonicity, 60),
    (7, "gradient correctness", gradient_correctness, 30),
    (8, "toy training", toy_training, 180),
    (9, "architecture invariants", architecture_invariants, 120),
    (10, "cli determinism", cli_determinism, 120),
]


def run_criterion(number, seed=0, schedule=None):
    schedule = schedule or build_linear_schedule()
    _, name, fn, budget = next(c for c in CRITERIA if c[0] == number)
    start = time.perf_counter()
    ok, detail = fn(schedule, seed)
    elapsed = time.perf_counter() - start
    if elapsed > budget:
        detail += f"; over time budget ({elapsed:.1f}s > {budget}s)"
    return Result(number, name, bool(ok) and elapsed <= budget, detail, elapsed, budget)


def run_all(seed=0, schedule=None, only=None):
    numbers = only or [c[0] for c in CRITERIA]
    return [run_criterion(n, seed, schedule) for n in numbers]


def format_report(results, seed):
    lines = [f"# seed={seed}", "criterion\tname\tstatus\ttime/budget\tdetail"]
    lines += [r.line() for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"# {passed}/{len(results)} passed")
    return "\n".join(lines) + "\n"
