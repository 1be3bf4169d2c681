"""Compiled vs pure-Python kernels, per kernel and for one training step end to end.

    python benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from ftz import _kernels_py

try:
    from ftz import _kernels
except ImportError:  # extension not built
    _kernels = None

STEP_SNIPPET = """
import time
from ftz.data import generate_dataset
from ftz.kernels import BACKEND
from ftz.mllm import ModelConfig, Tokenizer, build_model
from ftz.training import AdamW, partition_parameters, train_step
tok = Tokenizer()
model = build_model(ModelConfig(), 0, tok)
ds = generate_dataset(0, 16, "train", tok)
texts = [s.text_ids(tok) for s in ds]
tr, _ = partition_parameters(model.params, {"fusion", "connector", "lm"})
opt = AdamW(model.params, tr)
train_step(model, texts, opt, 1e-3, images=ds.images)
t = time.perf_counter()
for _ in range(REPEAT):
    train_step(model, texts, opt, 1e-3, images=ds.images)
print(BACKEND, (time.perf_counter() - t) / REPEAT)
"""


def kernel_cases(backend):
    state = np.array([1, 2, 3, 4], dtype=np.uint64)
    words = np.empty(1 << 16, dtype=np.uint64)
    x = np.random.default_rng(0).standard_normal(1 << 16).astype(np.float32)
    out, cdf, g = np.empty_like(x), np.empty_like(x), np.ones_like(x)
    return {
        "xoshiro_fill 65536 words": lambda: backend.xoshiro_fill(state, words),
        "splitmix64_fill 65536 words": lambda: backend.splitmix64_fill(7, words),
        "gelu_forward 65536 f32": lambda: backend.gelu_forward(x, out, cdf),
        "gelu_backward 65536 f32": lambda: backend.gelu_backward(x, cdf, g, out),
    }


def best_of(fn, repeat):
    number = 3
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def step_time(pure: bool, repeat: int) -> str:
    env = dict(os.environ, FTZ_PURE_PYTHON="1" if pure else "0")
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.replace("REPEAT", str(repeat))], env=env,
                         capture_output=True, text=True, check=True)
    backend, secs = res.stdout.split()
    return backend, float(secs)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _kernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first", file=sys.stderr)
        return 1
    py, cy = kernel_cases(_kernels_py), kernel_cases(_kernels)
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name in py:
        tp, tc = best_of(py[name], args.repeat), best_of(cy[name], args.repeat)
        print(f"{name:32s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.1f}x")
    (bp, sp), (bc, sc) = step_time(True, args.repeat), step_time(False, args.repeat)
    print(f"{'train step, batch 16':32s} {sp * 1e3:10.1f} {sc * 1e3:10.1f} {sp / sc:8.1f}x   ({bp} vs {bc})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
