"""
Why resampled ground truths are screened before training.

Halving a mask's resolution with nearest-neighbour sampling can erase a
thin trabecular strand. When that splits one trabecula into two, the
component count changes and the slice is discarded. A strand two pixels
thick survives exactly.
"""

import numpy as np

from lvnc.masks import EL, IC, T, connected_components, fidelity_filter, resample_mask

mask = np.full((64, 64), IC, np.uint8)
mask[:8] = EL
mask[20:28, 10:20] = T
mask[20:28, 30:40] = T

for name, rows in (("2-px bridge", slice(20, 22)), ("1-px bridge on an even row", slice(20, 21))):
    m = mask.copy()
    m[rows, 20:30] = T
    small = resample_mask(m, 32)
    d = fidelity_filter(m, small)
    print(f"{name}: components {connected_components(m, T)[0]} -> {connected_components(small, T)[0]}, "
          f"keep={d.keep}, reasons={d.reasons}")
    print("   relative errors " + ", ".join(f"{k} {v:.3f}" for k, v in d.errors.items()))
