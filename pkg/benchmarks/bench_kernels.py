#!/usr/bin/env python3
"""Benchmark the compiled recurrent kernels against the NumPy fallback.

Times the LSTM forward+backward hot loop at tagging-shaped workloads, then a
full supervised training epoch end to end under each backend. Run after
building the extension:

    python benchmarks/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from adatrig import _kernels_py

try:
    from adatrig import _kernels
except ImportError:
    _kernels = None


def time_kernel(impl, T, B, H, D, repeats):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(T, B, D))
    w_x = rng.normal(size=(D, 4 * H)) * 0.1
    w_h = np.ascontiguousarray(rng.normal(size=(H, 4 * H)) * 0.1)
    mask = np.ones((T, B))
    mask[T - 2 :, : B // 3] = 0.0
    mask = np.ascontiguousarray(mask)
    dy = np.ascontiguousarray(rng.normal(size=(T, B, H)))

    # warm up
    pre = np.ascontiguousarray(x @ w_x)
    out = impl.lstm_forward(pre, w_h, mask)
    impl.lstm_backward(dy, w_h, mask, out[3], out[4], out[1], out[2])

    t0 = time.perf_counter()
    for _ in range(repeats):
        pre = np.ascontiguousarray(x @ w_x)
        y, hs, cs, gates, tch = impl.lstm_forward(pre, w_h, mask)
        impl.lstm_backward(dy, w_h, mask, gates, tch, hs, cs)
    return (time.perf_counter() - t0) / repeats


def time_epoch(backend_env, n_sentences=300, epochs=2):
    """Train a BiLSTM for a couple of epochs in a subprocess per backend."""
    import subprocess
    import sys

    code = f"""
import os, time
os.environ["ADATRIG_KERNELS"] = "{backend_env}"
from adatrig.corpus import default_synthetic_spec, make_synthetic_pair
from adatrig.features import FeaturePlan, FeatureSpace, build_vocab
from adatrig.training import AdaConfig, train_supervised
import adatrig.kernels as k
spec = default_synthetic_spec(n_sentences=({n_sentences}, {n_sentences}), densities=(0.08, 0.08), seed=0)
src, tgt = make_synthetic_pair(spec, seed=0)
vocab = build_vocab(src, tgt, min_count=1)
feats = FeatureSpace(vocab, FeaturePlan(kind="STATIC", word_dim=64))
cfg = AdaConfig(seed=1, max_epochs={epochs}, patience={epochs})
t0 = time.perf_counter()
train_supervised("BILSTM", src, cfg, feats)
print((time.perf_counter() - t0) / {epochs})
"""
    out = subprocess.run(
        [sys.executable, "-c", code], capture_output=True, text=True, check=True
    )
    return float(out.stdout.strip().split("\n")[-1])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=50)
    args = ap.parse_args()

    if _kernels is None:
        print("compiled kernels not built; only the NumPy numbers will print")

    shapes = [
        (12, 16, 100, 64),  # synthetic benchmark shape
        (24, 16, 100, 300),  # pretrained-embedding shape
        (40, 16, 100, 3072),  # contextual-feature shape
    ]
    print(f"{'T':>4} {'B':>3} {'H':>4} {'D':>5} | {'numpy':>10} {'cython':>10} {'speedup':>8}")
    for T, B, H, D in shapes:
        t_py = time_kernel(_kernels_py, T, B, H, D, args.repeats)
        if _kernels is not None:
            t_cy = time_kernel(_kernels, T, B, H, D, args.repeats)
            print(f"{T:>4} {B:>3} {H:>4} {D:>5} | {t_py*1e3:>8.2f}ms {t_cy*1e3:>8.2f}ms {t_py/t_cy:>7.2f}x")
        else:
            print(f"{T:>4} {B:>3} {H:>4} {D:>5} | {t_py*1e3:>8.2f}ms {'n/a':>10} {'n/a':>8}")

    print("\nend-to-end supervised epoch (300 sentences, BiLSTM h=100):")
    t_py = time_epoch("py")
    print(f"  numpy  : {t_py:.2f}s/epoch")
    if _kernels is not None:
        t_cy = time_epoch("cython")
        print(f"  cython : {t_cy:.2f}s/epoch  ({t_py / t_cy:.2f}x)")


if __name__ == "__main__":
    main()
