"""
Mini-batch training of a U-Net with early stopping on validation loss.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .data import draw_rotation
from .errors import ContractError
from .losses import LossConfig, combined_loss, distance_maps
from .metrics import REGIONS, dice
from .optim import RAdam
from .tensor import Tape, backward, softmax_channels
from .unet import UNet, predict_from_probs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 25
    patience: int = 5
    batch_size: int = 2
    validation_fraction: float = 0.2
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.patience < self.max_epochs:
            raise ContractError("need 0 < patience < max_epochs")
        if not 0 < self.validation_fraction < 1:
            raise ContractError("validation_fraction must lie in (0, 1)")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strict decrease of the best value."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = None
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; return True if it is a new best."""
        if self.best is None or value < self.best:
            self.best, self.best_epoch, self.bad_epochs = value, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def run_schedule(val_losses, max_epochs=25, patience=5):
    """Epoch (1-based) at which training on a scripted loss sequence ends, and the best epoch."""
    stopper = EarlyStopping(patience)
    epoch = 0
    for epoch, value in enumerate(val_losses[:max_epochs], 1):
        stopper.update(epoch, value)
        if stopper.should_stop:
            break
    return epoch, stopper.best_epoch


def _rotate(a, k):
    return np.rot90(a, k, axes=(-2, -1)) if k else a


def batch_loss(model: UNet, images, masks, dist=None, loss_config=LossConfig(), chunk=32) -> float:
    """Mean combined loss over a set, evaluated without recording a tape."""
    if len(images) == 0:
        raise ContractError("empty evaluation set")
    if dist is None:
        dist = distance_maps(masks, loss_config.boundary_label)
    total = 0.0
    for s in range(0, len(images), chunk):
        probs = softmax_channels(model.forward(images[s:s + chunk]))
        part = combined_loss(probs, masks[s:s + chunk], loss_config, dist[s:s + chunk])
        total += float(part.data) * len(probs.data)
    return total / len(images)


def predict_set(model: UNet, images, chunk=32) -> np.ndarray:
    out = [model.predict(images[s:s + chunk]) for s in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[2:], dtype=np.uint8)


def mean_dice(preds, masks) -> dict:
    return {name: float(np.mean([dice(p, g, lab) for p, g in zip(preds, masks)]))
            for name, lab in REGIONS.items()}


@dataclass
class FitResult:
    model: UNet
    history: list
    best_epoch: int
    stopped_early: bool


def fit(model: UNet, train_set, val_set, loss_config: LossConfig = LossConfig(),
        config: TrainConfig = TrainConfig(), on_epoch=None) -> FitResult:
    """Train ``model`` in place and restore the parameters of the best validation epoch.

    ``train_set`` and ``val_set`` are (images (N, 1, S, S), masks (N, S, S))
    pairs of already normalised images. ``on_epoch`` is called with each
    history entry as it is produced.
    """
    x_train, y_train = train_set
    x_val, y_val = val_set
    if len(x_train) == 0 or len(x_val) == 0:
        raise ContractError("training and validation sets must be non-empty")
    y_train = np.asarray(y_train)
    d_train = distance_maps(y_train, loss_config.boundary_label)
    d_val = distance_maps(y_val, loss_config.boundary_label)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = RAdam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.patience)
    best_state = [p.data.copy() for p in params]
    history = []

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x_train))
        losses = []
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            xb, yb, db = x_train[idx], y_train[idx], d_train[idx]
            if config.augment:
                ks = [draw_rotation(rng) for _ in idx]
                if any(ks):
                    # the signed distance map rotates with its mask
                    xb = np.stack([_rotate(a, k) for a, k in zip(xb, ks)])
                    yb = np.stack([_rotate(a, k) for a, k in zip(yb, ks)])
                    db = np.stack([_rotate(a, k) for a, k in zip(db, ks)])
            with Tape() as tape:
                probs = softmax_channels(model.forward(xb))
                loss = combined_loss(probs, yb, loss_config, db)
            backward(tape, loss, params)
            opt.step()
            losses.append(float(loss.data) * len(idx))
        train_loss = sum(losses) / len(x_train)
        val_loss = batch_loss(model, x_val, y_val, d_val, loss_config)
        val_dice = mean_dice(predict_set(model, x_val), y_val)
        improved = stopper.update(epoch, val_loss)
        if improved:
            best_state = [p.data.copy() for p in params]
        entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                 "val_dice": val_dice, "improved": improved}
        history.append(entry)
        log.info("epoch %d train %.4f val %.4f dice %s", epoch, train_loss, val_loss,
                 " ".join(f"{k}={v:.3f}" for k, v in val_dice.items()))
        if on_epoch is not None:
            on_epoch(entry)
        if stopper.should_stop:
            break

    for p, saved in zip(params, best_state):
        p.data = saved
    return FitResult(model, history, stopper.best_epoch, stopper.should_stop)
