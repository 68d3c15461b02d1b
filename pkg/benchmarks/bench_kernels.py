"""Numba vs pure-numpy timings for the hot kernels and a full sampling run.

    python benchmarks/bench_kernels.py [--size 80x400] [--repeats 20]

The full-sampler row runs each backend in a subprocess, because the backend
is fixed at import time by MELDIFF_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from meldiff import _kernels as K

SAMPLER_SNIPPET = """
import time
from meldiff.bench import default_predictor
from meldiff.sampler import build_trajectory, sample
from meldiff.schedule import build_linear_schedule
s = build_linear_schedule()
p = default_predictor({c}, s)
spec = build_trajectory(400, 1, 1.0)
sample(p, None, ({c}, {f}), build_trajectory(400, 57, 1.0), s, rng=0)
t0 = time.perf_counter()
sample(p, None, ({c}, {f}), spec, s, rng=1)
print(time.perf_counter() - t0)
"""


def best(fn, repeats):
    return min(timeit.repeat(fn, number=1, repeat=repeats))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", default="80x400")
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    c, f = (int(v) for v in args.size.split("x"))
    gen = np.random.default_rng(0)
    x, e, z = (gen.standard_normal((64, c, f)) for _ in range(3))

    K.affine3(x, e, z, 1.0, 2.0, 3.0)
    rows = [
        ("affine3", best(lambda: K.affine3_numpy(x, e, z, 1.0, 2.0, 3.0), args.repeats),
         best(lambda: K.affine3(x, e, z, 1.0, 2.0, 3.0), args.repeats) if K.HAS_NUMBA else None),
    ]
    sampler = {}
    for name, flag in (("numpy", "1"), ("numba", "")):
        env = dict(os.environ, MELDIFF_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", SAMPLER_SNIPPET.format(c=c, f=f)], env=env,
                             capture_output=True, text=True, check=True)
        sampler[name] = float(out.stdout.strip())
    rows.append(("sample gamma=1", sampler["numpy"], sampler["numba"]))

    print("kernel,numpy_s,numba_s,ratio")
    for name, slow, fast in rows:
        if fast is None:
            print(f"{name},{slow:.6f},,")
        else:
            print(f"{name},{slow:.6f},{fast:.6f},{slow / fast:.2f}")


if __name__ == "__main__":
    main()
