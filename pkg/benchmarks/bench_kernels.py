"""Time the numba and numpy paths of every hot kernel, then one full
pre-training step under each backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json PATH]

The step benchmark runs in subprocesses because the backend is fixed at
import time by ROIMAE_DISABLE_NUMBA.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from roimae import _kernels as K


def cases(rng):
    x = rng.normal(size=(8 * 64 * 2, 16))  # (batch·T·heads, width) rows
    gain, bias = np.ones(16), np.zeros(16)
    y, xhat, inv = K.layer_norm_fwd_np(x, gain, bias, 1e-5)
    att = rng.normal(size=(8 * 2 * 64, 64))
    sm = K.softmax_fwd_np(att)
    theta, g = rng.normal(size=20000), rng.normal(size=20000)
    innov = rng.normal(size=(200, 16))
    pos, neg = rng.random(300), rng.random(300)
    return {
        "splitmix64 (1e5)": (lambda impl: impl(12345, 0, 100_000), "splitmix64"),
        "layer_norm_fwd": (lambda impl: impl(x, gain, bias, 1e-5), "layer_norm_fwd"),
        "layer_norm_bwd": (lambda impl: impl(y, xhat, inv, gain), "layer_norm_bwd"),
        "softmax_fwd": (lambda impl: impl(att), "softmax_fwd"),
        "softmax_bwd": (lambda impl: impl(sm, att), "softmax_bwd"),
        "adamw (2e4 params)": (lambda impl: impl(theta.copy(), g, np.zeros_like(g), np.zeros_like(g),
                                                 1e-3, 1e-5, 0.9, 0.999, 1e-8, 1), "adamw"),
        "ar1 (200x16)": (lambda impl: impl(innov, 0.9), "ar1"),
        "auc_pairs (300x300)": (lambda impl: impl(pos, neg), "auc_pairs"),
    }


def best_of(fn, repeat):
    fn()  # warm-up; triggers numba compilation
    n = max(1, int(0.05 / max(timeit.timeit(fn, number=1), 1e-7)))
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


STEP = """
import time, numpy as np
from roimae import BACKEND
from roimae.synth import SynthConfig, generate
from roimae.model import ModelConfig
from roimae.training import PretrainConfig, pretrain
data = generate(SynthConfig(num_subjects=12))
mc = ModelConfig(num_rois=16, window_len=64, hidden_dim=16, num_heads=2, num_layers=2, ffn_dim=32,
                 recon_hidden=16, clf_hidden=16)
cfg = lambda n: PretrainConfig(steps=n, batch=8, lr=4e-3, log_every=10**9)
pretrain(data, cfg(3), mc, 0)
t = time.perf_counter(); pretrain(data, cfg(60), mc, 0); dt = (time.perf_counter() - t) / 60
print(BACKEND, dt)
"""


def step_time(disable: bool):
    env = dict(os.environ, ROIMAE_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", STEP], env=env, capture_output=True, text=True, check=True)
    backend, dt = out.stdout.split()
    return backend, float(dt)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    ap.add_argument("--skip-step", action="store_true")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not importable; only the numpy path exists")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for label, (call, name) in cases(rng).items():
        t_np = best_of(lambda: call(getattr(K, name + "_np")), args.repeat)
        t_nb = best_of(lambda: call(getattr(K, name + "_nb")), args.repeat)
        rows.append({"kernel": label, "numpy_s": t_np, "numba_s": t_nb})
        print(f"{label:<22}{t_np * 1e6:>12.1f}{t_nb * 1e6:>12.1f}{t_np / t_nb:>9.2f}x")
    if not args.skip_step:
        res = dict(step_time(True) for _ in range(1))
        res.update(dict(step_time(False) for _ in range(1)))
        print(f"\npre-training step (B=8, T=64, R=16, d=16): "
              + ", ".join(f"{k} {v * 1e3:.2f} ms" for k, v in sorted(res.items())))
        rows.append({"kernel": "pretrain_step", **{k + "_s": v for k, v in res.items()}})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
