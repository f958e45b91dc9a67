"""
A small end-to-end run: phantoms, cross-validated training, held-out scores.

This uses a reduced setting (80 slices, 3 folds, 20 epochs) that finishes in
a couple of minutes on one core. Trabecular scores stay well below those
of the full 200-slice, 5-fold, 25-epoch protocol run by the acceptance suite.
"""

import tempfile
import time

from lvnc.data import generate_dataset
from lvnc.losses import LossConfig
from lvnc.metrics import render_text
from lvnc.pipeline import evaluate_folds, train_fold
from lvnc.training import TrainConfig
from lvnc.unet import UNetConfig

K = 3
t0 = time.perf_counter()
with tempfile.TemporaryDirectory() as d:
    manifest = generate_dataset(d, 80, size=64, seed=1)
    positives = sum(r.lvnc_positive for r in manifest.records)
    print(f"{len(manifest)} slices from {len(manifest.by_patient())} patients, {positives} LVNC-positive")
    models = {}
    for fold in range(K):
        result, meta = train_fold(manifest, fold, K, UNetConfig(depth=3, base_channels=8),
                                  TrainConfig(max_epochs=20, patience=5, seed=0), LossConfig())
        last = result.history[result.best_epoch - 1]
        print(f"fold {fold}: {len(meta['train_ids'])} train / {len(meta['val_ids'])} val / "
              f"{len(meta['test_ids'])} test, best epoch {result.best_epoch}, "
              f"val Dice T {last['val_dice']['T']:.3f}")
        models[fold] = result.model
    report = evaluate_folds(manifest, models, K, seed=0)
print()
print(render_text(report))
print(f"wall time {time.perf_counter() - t0:.0f} s")
