"""Numba vs numpy kernels on toy-trainer shapes.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Also times one local training call end to end under each backend by
re-running itself with GUI_FEDSIM_JIT=0 and =1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from gui_fedsim.kernels import NUMBA, NUMPY
from gui_fedsim.toy import NUM_KINDS


def cases(rng):
    W = rng.normal(size=(NUM_KINDS, 65)) * 0.1
    X = rng.normal(size=(4, 64))
    y = rng.integers(0, NUM_KINDS, size=4)
    Xbig = rng.normal(size=(512, 64))
    ybig = rng.integers(0, NUM_KINDS, size=512)
    d = NUM_KINDS * 65
    x, m, delta = rng.normal(size=(3, d))
    v = rng.random(d)
    deltas = rng.normal(size=(3, d))
    w = np.full(3, 1 / 3)
    return {
        "softmax_xent batch=4": lambda be: be.softmax_xent(W, X, y),
        "softmax_xent batch=512": lambda be: be.softmax_xent(W, Xbig, ybig),
        "predict n=512": lambda be: be.predict(W, Xbig),
        "weighted_sum 3 clients": lambda be: be.weighted_sum(deltas, w),
        "yogi step": lambda be: be.yogi(x, m, v, delta, 0.9, 0.999, 1e-3, 1e-6),
    }


def end_to_end(repeat):
    code = (
        "import timeit\n"
        "from gui_fedsim import toy\n"
        "from gui_fedsim.kernels import ACTIVE\n"
        "eps = toy.gen_synthetic(toy.SynthSpec(num_values=3, episodes_per_value=20))\n"
        "spec = toy.TrainSpec(local_epochs=3, client_lr=0.03)\n"
        "x0 = toy.init_params()\n"
        "feats = toy.stack_features(eps)\n"
        "toy.local_train(x0, eps, spec, features=feats)\n"
        f"t = min(timeit.repeat(lambda: toy.local_train(x0, eps, spec, features=feats), number=1, repeat={repeat}))\n"
        "print(ACTIVE.name, t)\n"
    )
    out = {}
    for flag in ("0", "1"):
        res = subprocess.run([sys.executable, "-c", code], env={**os.environ, "GUI_FEDSIM_JIT": flag},
                             capture_output=True, text=True, check=True)
        name, t = res.stdout.split()
        out[name] = float(t)
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for label, fn in cases(rng).items():
        fn(NUMBA)  # compile
        t_np = min(timeit.repeat(lambda: fn(NUMPY), number=10, repeat=args.repeat // 10 or 1)) / 10
        t_nb = min(timeit.repeat(lambda: fn(NUMBA), number=10, repeat=args.repeat // 10 or 1)) / 10
        print(f"{label:28s} {t_np * 1e6:10.1f} {t_nb * 1e6:10.1f} {t_np / t_nb:8.2f}")
    e2e = end_to_end(max(args.repeat // 20, 3))
    print()
    for name, t in e2e.items():
        print(f"local_train (60 episodes, 3 epochs) {name:6s} {t * 1e3:8.2f} ms")


if __name__ == "__main__":
    main()
