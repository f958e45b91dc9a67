"""
Training objective: ``2 * lovasz_softmax + boundary_loss`` on trabeculae.

All losses take per-pixel class probabilities (the output of
``softmax_channels``) and integer label maps of shape (N, H, W).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .masks import LABELS, T
from .tensor import Tensor, add, record, scale


@dataclass(frozen=True)
class LossConfig:
    lovasz_weight: float = 2.0
    boundary_weight: float = 1.0
    boundary_label: int = T
    # divide signed distances by the image diagonal; False keeps pixel units
    normalize_distance: bool = True

    def __post_init__(self):
        if self.lovasz_weight < 0 or self.boundary_weight < 0:
            raise ContractError("loss weights must be non-negative")
        if self.boundary_label not in LABELS:
            raise ContractError(f"invalid boundary label {self.boundary_label}")


def _check_labels(probs: Tensor, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    n, c, h, w = probs.shape
    if labels.shape != (n, h, w):
        raise ContractError(f"labels shape {labels.shape} does not match probabilities {probs.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label values must lie in 0..{c - 1}")
    return labels


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovász extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probs: Tensor, labels) -> Tensor:
    """Lovász-Softmax loss averaged over the classes present in each image, then over images."""
    labels = _check_labels(probs, labels)
    n, c, h, w = probs.shape
    p = probs.data.reshape(n, c, h * w)
    lab = labels.reshape(n, h * w)
    total = 0.0
    # d loss / d p, filled per image and class
    dp = np.zeros_like(p)
    for i in range(n):
        present = np.unique(lab[i])
        for cls in present:
            fg = (lab[i] == cls).astype(np.float64)
            signed = fg - p[i, cls]
            errors = np.abs(signed)
            perm = np.argsort(-errors, kind="stable")
            g = lovasz_grad(fg[perm])
            total += errors[perm] @ g / len(present)
            # errors = 1 - p on foreground, p elsewhere
            dp[i, cls, perm] = -np.sign(fg[perm] - 0.5) * g / len(present)
    loss = np.array(total / n)
    dp /= n

    def _backward(gout):
        return (gout * dp.reshape(probs.shape),)

    return record("lovasz_softmax", loss, (probs,), _backward)


def signed_distance_map(mask, target_label: int) -> np.ndarray:
    """Signed Euclidean distance to the ``target_label`` region.

    Positive outside the region (distance to its nearest pixel), negative
    inside (minus the distance to the nearest non-region pixel). If either
    side is empty the missing distances are capped at the image diagonal.
    """
    mask = np.asarray(mask)
    region = mask == target_label
    cap = float(np.hypot(*mask.shape))
    if not region.any():
        return np.full(mask.shape, cap)
    if region.all():
        return np.full(mask.shape, -cap)
    outside = ndimage.distance_transform_edt(~region)
    inside = ndimage.distance_transform_edt(region)
    return np.where(region, -inside, outside)


def distance_maps(labels, target_label: int = T) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    return np.stack([signed_distance_map(m, target_label) for m in labels])


def boundary_loss(probs: Tensor, labels, config: LossConfig = LossConfig(),
                  dist: Optional[np.ndarray] = None) -> Tensor:
    """Mean over pixels and images of distance map times predicted probability of the boundary label.

    ``dist`` may hold precomputed pixel-unit maps of shape (N, H, W); it must
    match ``distance_maps(labels, config.boundary_label)``. With
    ``config.normalize_distance`` the maps are divided by the image diagonal,
    so the term stays O(1) whatever the image size.
    """
    labels = _check_labels(probs, labels)
    if dist is None:
        dist = distance_maps(labels, config.boundary_label)
    n, c, h, w = probs.shape
    k = config.boundary_label
    if config.normalize_distance:
        dist = dist / np.hypot(h, w)
    value = np.array((dist * probs.data[:, k]).mean())
    weight = dist / (n * h * w)

    def _backward(gout):
        g = np.zeros(probs.shape)
        g[:, k] = gout * weight
        return (g,)

    return record("boundary_loss", value, (probs,), _backward)


def combined_loss(probs: Tensor, labels, config: LossConfig = LossConfig(),
                  dist: Optional[np.ndarray] = None) -> Tensor:
    lov = scale(lovasz_softmax(probs, labels), config.lovasz_weight)
    bnd = scale(boundary_loss(probs, labels, config, dist), config.boundary_weight)
    return add(lov, bnd)
