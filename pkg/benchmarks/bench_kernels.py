"""Compiled kernels vs the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Per-kernel timings come from one process holding both modules. The
training-step timing runs twice in subprocesses, once with
ETHODEC_PURE_PYTHON=1, since the backend is fixed at import.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from ethodec._kernels import compiled_kernels, python_kernels


def cases(rng):
    x = rng.normal(size=(512, 256))
    g = rng.normal(size=(512, 256))
    y = python_kernels.softmax_rows(x)
    ls = python_kernels.log_softmax_rows(x)
    xhat, rstd = python_kernels.layer_norm_rows(x, 1e-5)
    n = 200_000
    scores = rng.normal(size=5000)
    pos = (rng.random(5000) < 0.1).astype(np.int64)
    labels = np.repeat(rng.integers(0, 10, size=2000), rng.integers(1, 40, size=2000)).astype(np.int64)
    adam = [rng.normal(size=n), rng.normal(size=n), np.zeros(n), np.zeros(n)]
    return {
        "softmax_rows": lambda k: k.softmax_rows(x),
        "softmax_rows_backward": lambda k: k.softmax_rows_backward(y, g),
        "log_softmax_rows": lambda k: k.log_softmax_rows(x),
        "log_softmax_rows_backward": lambda k: k.log_softmax_rows_backward(ls, g),
        "layer_norm_rows": lambda k: k.layer_norm_rows(x, 1e-5),
        "layer_norm_rows_backward": lambda k: k.layer_norm_rows_backward(g, xhat, rstd),
        "gelu": lambda k: k.gelu(x),
        "gelu_backward": lambda k: k.gelu_backward(x, g),
        "adamw_update": lambda k: k.adamw_update(*adam, 1e-4, 0.9, 0.999, 1e-8, 0.01, 0.1, 0.001),
        "average_precision": lambda k: k.average_precision(scores, pos),
        "run_lengths": lambda k: k.run_lengths(labels),
    }


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


STEP = """
import time, numpy as np
from ethodec._kernels import BACKEND
from ethodec.autodiff import Tape, parameter
from ethodec.decoder import DecoderConfig, QueryBank, QueryDecoderModel
from ethodec.optim import AdamW
from ethodec.training import bce_loss
rng = np.random.default_rng(0)
bank = QueryBank(parameter(rng.normal(size=(12, 64))), list(range(12)))
model = QueryDecoderModel.create(bank, DecoderConfig(), seed=0)
x = rng.normal(size=(64, 16, 64))
y = (rng.random((64, 12)) < 0.2).astype(int)
opt = AdamW(model.parameters())
times = []
for _ in range(6):
    t = time.perf_counter()
    opt.zero_grad()
    with Tape() as tape:
        loss = bce_loss(model.forward(x), y)
        tape.backward(loss)
    opt.step(1e-4)
    times.append(time.perf_counter() - t)
print(BACKEND, min(times[1:]))
"""


def train_step(pure):
    env = dict(os.environ, ETHODEC_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
    backend, secs = out.stdout.split()
    return backend, float(secs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    compiled = compiled_kernels()
    if compiled is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return 1
    rows = []
    print(f"{'kernel':28s} {'cython':>12s} {'numpy':>12s} {'speedup':>8s}")
    for name, fn in cases(np.random.default_rng(0)).items():
        tc = best_of(lambda: fn(compiled), args.repeat)
        tp = best_of(lambda: fn(python_kernels), args.repeat)
        rows.append({"kernel": name, "cython_s": tc, "numpy_s": tp, "speedup": tp / tc})
        print(f"{name:28s} {tc * 1e6:10.1f}us {tp * 1e6:10.1f}us {tp / tc:7.2f}x")

    step = {}
    for pure in (False, True):
        backend, secs = train_step(pure)
        step[backend] = secs
    print(f"\ntraining step (B=64, T=16, C=12, D=64, 3 layers): "
          f"cython {step['cython'] * 1e3:.1f} ms, numpy {step['python'] * 1e3:.1f} ms, "
          f"speedup {step['python'] / step['cython']:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "train_step_s": step}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
