"""
The two halves of the training objective.

Lovász-Softmax is a smooth surrogate of one minus the Jaccard index,
averaged over the labels present in the ground truth. The boundary term
weighs the predicted trabecular probability by the signed distance to the
true trabeculae: mass far outside costs, mass inside is rewarded.
"""

import numpy as np

from lvnc.losses import LossConfig, boundary_loss, combined_loss, lovasz_softmax, signed_distance_map
from lvnc.masks import T
from lvnc.tensor import Tensor

gt = np.array([[[0, 0, 1, 1],
                [0, 3, 3, 1],
                [2, 3, 3, 1],
                [2, 2, 1, 1]]])


def onehot(labels):
    return Tensor(np.moveaxis(np.eye(4)[labels], -1, 1))


print("signed distance to T (negative inside):")
print(signed_distance_map(gt[0], T).round(2))

perfect = onehot(gt)
shifted = onehot(np.roll(gt, 1, axis=2))
uniform = Tensor(np.full((1, 4, 4, 4), 0.25))
for name, probs in (("perfect", perfect), ("shifted", shifted), ("uniform", uniform)):
    lov = float(lovasz_softmax(probs, gt).data)
    bnd = float(boundary_loss(probs, gt).data)
    total = float(combined_loss(probs, gt, LossConfig()).data)
    print(f"{name:<8} lovasz {lov:.4f}  boundary {bnd:+.4f}  2*lovasz+boundary {total:+.4f}")
