"""Time the numba kernels against the numpy fallback, plus one full desk training step per backend.

    python3 benchmarks/bench_kernels.py [--repeat 50]

The end-to-end step is run in a subprocess per backend because the backend
is fixed at import time by ``MSM_MAE_NUMBA``.
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from msm_mae import _kernels as K

STEP_SNIPPET = r"""
import json, timeit, numpy as np
from msm_mae import _kernels
from msm_mae.model import build_model
from msm_mae.patches import PatchConfig
from msm_mae.pretrain import OptimizerState, TrainConfig, train_step
params = build_model(96, PatchConfig(16, 16), seed=0)
opt = OptimizerState.zeros_like(params)
cfg = TrainConfig(epochs=1, warmup_epochs=0, batch_size=8)
batch = np.random.default_rng(0).standard_normal((8, 80, 96)).astype(np.float32)
train_step(batch, params, opt, cfg, 100)  # warm-up / JIT
t = min(timeit.repeat(lambda: train_step(batch, params, opt, cfg, 100), number=1, repeat=REPEAT))
print(json.dumps({"backend": _kernels.backend(), "step_ms": 1e3 * t}))
"""


def kernel_cases(rows, dim, rng):
    x = rng.standard_normal((rows, dim))
    dy = rng.standard_normal((rows, dim))
    g, b = rng.standard_normal(dim), rng.standard_normal(dim)
    _, mean, rstd = K.layernorm_fwd_np(x, g, b, 1e-6)
    a = K.softmax_fwd_np(x)
    p, m, v = (rng.standard_normal(rows * dim) for _ in range(3))
    v = np.abs(v)
    return {
        "layernorm_fwd": lambda f: f(x, g, b, 1e-6),
        "layernorm_bwd": lambda f: f(dy, x, mean, rstd, g),
        "softmax_fwd": lambda f: f(x),
        "softmax_bwd": lambda f: f(a, dy),
        "gelu_fwd": lambda f: f(x),
        "gelu_bwd": lambda f: f(x, dy),
        "adamw_update": lambda f: f(p.copy(), dy.reshape(-1), m.copy(), v.copy(), 1e-3, 0.9, 0.95, 1e-8, 0.05, 10),
    }


def bench_kernels(repeat, shapes=((240, 64), (240, 256), (2400, 64))):
    rng = np.random.default_rng(0)
    rows = []
    for shape in shapes:
        for name, call in kernel_cases(*shape, rng).items():
            f_np = getattr(K, name + "_np")
            f_nb = getattr(K, name + "_nb", None)
            t_np = min(timeit.repeat(lambda: call(f_np), number=1, repeat=repeat))
            t_nb = float("nan")
            if f_nb is not None:
                call(f_nb)  # compile
                t_nb = min(timeit.repeat(lambda: call(f_nb), number=1, repeat=repeat))
            rows.append((name, shape, t_np, t_nb))
    return rows


def bench_step(repeat):
    out = []
    for flag in ("0", "1"):
        env = dict(os.environ, MSM_MAE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.replace("REPEAT", str(repeat))],
                             env=env, capture_output=True, text=True, check=True)
        out.append(json.loads(res.stdout.strip().splitlines()[-1]))
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--step-repeat", type=int, default=5)
    ap.add_argument("--no-step", action="store_true")
    args = ap.parse_args(argv)
    if not K.HAS_NUMBA:
        print("numba not importable; only the numpy path can be timed")
    print(f"{'kernel':<15} {'shape':>12} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, shape, t_np, t_nb in bench_kernels(args.repeat):
        print(f"{name:<15} {str(shape):>12} {1e6 * t_np:10.1f} {1e6 * t_nb:10.1f} {t_np / t_nb:8.2f}")
    if not args.no_step:
        print()
        for r in bench_step(args.step_repeat):
            print(f"desk train step (batch 8, T=96), {r['backend']:>5}: {r['step_ms']:.1f} ms")


if __name__ == "__main__":
    main()
