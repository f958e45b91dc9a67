"""
Inference timing with warm-up.

Five untimed calls let caches and BLAS thread pools settle, then one hundred
calls are timed individually. The report gives mean (std) in milliseconds
and checks that every run produced the same masks.
"""

import numpy as np

from lvnc.metrics import benchmark_inference, render_timing
from lvnc.unet import UNet, UNetConfig

model = UNet.create(UNetConfig(depth=3, base_channels=8, input_size=64), seed=0)
batch = np.random.default_rng(0).standard_normal((4, 1, 64, 64))
for threads in (1, None):
    rep = benchmark_inference(model, batch, runs=100, warmup=5, threads=threads)
    print(render_timing(rep), "deterministic" if rep.deterministic else "NOT deterministic")
