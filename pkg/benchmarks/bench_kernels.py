"""Compare the numba-compiled kernels with the plain-numpy fallback.

Each kernel runs in its compiled fused-loop form (``kernels.LOOPS``) and in
its vectorised numpy form (``kernels.NUMPY``) on the shapes used in
training: batch 16, 40-frame crops, 64 hidden units.  A final row times one full training step in a
subprocess per backend, selected with ``EMOCAT_DISABLE_NUMBA``.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from emocat import kernels

STEP_SNIPPET = """
import time, numpy as np
from emocat.corpus import CorpusSpec, generate_corpus
from emocat.model import EmoCatConfig
from emocat.train import TrainPlan, train
recs = generate_corpus(CorpusSpec(neutral_a=40, emotional_a=20, neutral_b=40, emotional_b=12))
plan = TrainPlan(main_steps=2, log_every=0, heldout=0)
train(EmoCatConfig(), plan, recs)  # warm-up, includes compilation
plan = TrainPlan(main_steps={steps}, log_every=0, heldout=0)
t = time.perf_counter(); train(EmoCatConfig(), plan, recs); print((time.perf_counter() - t) / {steps})
"""


def _inputs(rng):
    T, B, H, C = 40, 16, 64, 64
    return {
        "conv1d_forward": (rng.normal(size=(B, T, C)), rng.normal(size=(5, C, C)) * 0.1, np.zeros(C)),
        "lstm_forward": (rng.normal(size=(T, B, 4 * H)), rng.normal(size=(H, 4 * H)) * 0.1),
        "gru_forward": (rng.normal(size=(T, B, 3 * H)), rng.normal(size=(H, 3 * H)) * 0.1, np.ones((T, B))),
    }


def _backward_inputs(fwd, rng):
    T, B, H = 40, 16, 64
    hs, cs, gates = kernels.lstm_forward(*fwd["lstm_forward"])
    gh, ggates = kernels.gru_forward(*fwd["gru_forward"])
    x, w, _ = fwd["conv1d_forward"]
    out, cols = kernels.conv1d_forward(*fwd["conv1d_forward"])
    return {
        "conv1d_backward": (rng.normal(size=out.shape), cols, w, x.shape[1]),
        "lstm_backward": (rng.normal(size=(T, B, H)), hs, cs, gates, fwd["lstm_forward"][1]),
        "gru_backward": (rng.normal(size=(T, B, H)), gh, ggates, fwd["gru_forward"][1], fwd["gru_forward"][2]),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    fwd = _inputs(rng)
    cases = {**fwd, **_backward_inputs(fwd, rng)}
    rows = []
    for name, args in cases.items():
        fn = kernels.LOOPS[name]
        plain = kernels.NUMPY[name]
        fn(*args)  # compile outside the timing
        jit_t = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
        np_t = min(timeit.repeat(lambda: plain(*args), number=1, repeat=repeat))
        rows.append((name, jit_t, np_t))
    return rows


def bench_step(steps):
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, EMOCAT_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                             capture_output=True, text=True, check=True)
        out[label] = float(res.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=20, help="training steps timed per backend")
    args = ap.parse_args()
    if kernels.backend() != "numba":
        print("numba unavailable or disabled; the numba column times uncompiled Python loops")
    print(f"{'kernel':18s} {'numba ms':>10s} {'numpy ms':>10s} {'speed-up':>9s}")
    for name, jit_t, np_t in bench_kernels(args.repeat):
        print(f"{name:18s} {jit_t * 1e3:10.3f} {np_t * 1e3:10.3f} {np_t / jit_t:8.1f}x")
    step = bench_step(args.steps)
    print(f"{'train step':18s} {step['numba'] * 1e3:10.3f} {step['numpy'] * 1e3:10.3f} "
          f"{step['numpy'] / step['numba']:8.1f}x")


if __name__ == "__main__":
    main()
