"""
The tape-based autodiff engine against finite differences.

Every operation run inside a ``Tape`` context is recorded. ``backward``
walks the record in reverse and fills ``.grad`` for each parameter. Here the
gradients of a small U-Net's training loss are compared with central
differences for a handful of entries.
"""

import numpy as np

from lvnc.losses import combined_loss
from lvnc.tensor import Tape, backward, softmax_channels
from lvnc.unet import UNet, UNetConfig

rng = np.random.default_rng(1)
model = UNet.create(UNetConfig(depth=2, base_channels=4, input_size=8), seed=1)
x = rng.standard_normal((1, 1, 8, 8))
labels = rng.integers(0, 4, (1, 8, 8))


def loss_value():
    return float(combined_loss(softmax_channels(model.forward(x)), labels).data)


with Tape() as tape:
    loss = combined_loss(softmax_channels(model.forward(x)), labels)
backward(tape, loss, model.parameters())
print(f"loss {float(loss.data):.6f}, {len(tape)} recorded operations\n")

h = 1e-5
print(f"{'parameter':<26} {'tape':>12} {'central diff':>13}")
for name in ("enc0.conv1.weight", "bottleneck.conv2.bias", "dec1.conv1.weight", "head.weight"):
    p = model.params[name]
    flat = p.data.reshape(-1)
    i = int(rng.integers(flat.size))
    orig = flat[i]
    flat[i] = orig + h
    up = loss_value()
    flat[i] = orig - h
    down = loss_value()
    flat[i] = orig
    print(f"{name + f'[{i}]':<26} {p.grad.reshape(-1)[i]:>12.6e} {(up - down) / (2 * h):>13.6e}")
