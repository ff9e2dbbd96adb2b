"""Time the numba and numpy kernel backends side by side.

    python3 benchmarks/bench_kernels.py [--rows 4096] [--cols 128] [--repeat 20]

Part one calls each kernel directly. Part two times full training steps in
subprocesses with LARSLAB_NUMBA=0 and =1, since the backend is fixed at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from larslab import kernels as K

STEP_SNIPPET = """
import time
from larslab import kernels
from larslab.adapters import attach, AdapterSpec
from larslab.config import TrainConfig
from larslab.harness import train
from larslab.tasks import make_task
from larslab.transformer import BackboneConfig, build_backbone
cfg = BackboneConfig()
model = build_backbone(cfg)
adapters = attach(model, AdapterSpec())
task = make_task("seqclass", S={S}, num_examples=64, vocab=cfg.vocab)
train(model, adapters, task, TrainConfig(steps=2))  # warm up jit
t = time.perf_counter()
train(model, adapters, task, TrainConfig(steps={steps}))
print(kernels.backend_name(), (time.perf_counter() - t) / {steps})
"""


def kernel_cases(rows, cols, rng):
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    g = rng.standard_normal((rows, cols)).astype(np.float32)
    _, mean, var = K.NUMPY.layer_norm_forward(x, 1e-5)
    y = K.NUMPY.softmax_forward(x)
    return {
        "gelu_forward": (x,),
        "gelu_backward": (x, g),
        "softmax_forward": (x,),
        "softmax_backward": (y, g),
        "layer_norm_forward": (x, 1e-5),
        "layer_norm_backward": (x, mean, var, g, 1e-5),
    }


def bench_kernels(rows, cols, repeat):
    backends = [K.NUMPY] + ([K.NUMBA] if K.NUMBA is not None else [])
    cases = kernel_cases(rows, cols, np.random.default_rng(0))
    print(f"kernels on [{rows}, {cols}] float32, best of {repeat} (ms)")
    print(f"{'kernel':20s}" + "".join(f"{b.name:>10s}" for b in backends) + "   speedup")
    for name, args in cases.items():
        times = []
        for b in backends:
            fn = getattr(b, name)
            fn(*args)  # compile
            times.append(min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat)) * 1e3)
        speed = f"{times[0] / times[1]:8.2f}x" if len(times) == 2 else "     n/a"
        print(f"{name:20s}" + "".join(f"{t:10.3f}" for t in times) + f"  {speed}")


def bench_steps(S, steps):
    print(f"\ntraining step, default config, S={S}, mean of {steps} steps (s)")
    for flag in ("0", "1"):
        env = dict(os.environ, LARSLAB_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(S=S, steps=steps)],
                             env=env, capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()
        print(f"LARSLAB_NUMBA={flag} ({name:5s}) {float(secs):.4f}")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=128)
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--S", type=int, default=128)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--skip-steps", action="store_true")
    args = p.parse_args(argv)
    bench_kernels(args.rows, args.cols, args.repeat)
    if not args.skip_steps:
        bench_steps(args.S, args.steps)


if __name__ == "__main__":
    main()
