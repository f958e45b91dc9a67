"""
End-to-end steps shared by the command line and the demo scripts:
cross-validation splits, per-fold training, held-out evaluation, overlays.
"""

import json
from dataclasses import asdict

import numpy as np

from .data import DatasetManifest, load_arrays, normalize, stratified_kfold, train_val_split
from .errors import ContractError
from .losses import LossConfig
from .masks import EL, IC, T, fidelity_filter, mask_pta
from .metrics import MetricsReport, evaluate_masks
from .rasters import read_mask
from .training import FitResult, TrainConfig, fit, predict_set
from .unet import UNet, UNetConfig


def fold_split(manifest: DatasetManifest, fold: int, k: int = 5, seed: int = 0,
               validation_fraction: float = 0.2):
    """Return (train, val, test) record lists for one cross-validation fold."""
    if not 0 <= fold < k:
        raise ContractError(f"fold index {fold} outside 0..{k - 1}")
    folds = stratified_kfold(manifest.records, k, seed)
    test = folds[fold]
    rest = [r for i, f in enumerate(folds) if i != fold for r in f]
    train, val = train_val_split(rest, validation_fraction, seed + 1000 + fold)
    return train, val, test


def train_fold(manifest: DatasetManifest, fold: int, k: int = 5,
               unet_config: UNetConfig = UNetConfig(), train_config: TrainConfig = TrainConfig(),
               loss_config: LossConfig = LossConfig(), on_epoch=None):
    """Train one fold; returns (FitResult, checkpoint metadata)."""
    train, val, test = fold_split(manifest, fold, k, train_config.seed,
                                  train_config.validation_fraction)
    x_tr, y_tr = load_arrays(manifest, train)
    x_va, y_va = load_arrays(manifest, val)
    if x_tr.shape[-1] != unet_config.input_size:
        raise ContractError(f"slices are {x_tr.shape[-1]} px but the model expects "
                            f"{unet_config.input_size}")
    model = UNet.create(unet_config, train_config.seed)
    result = fit(model, (x_tr, y_tr), (x_va, y_va), loss_config, train_config, on_epoch)
    metadata = {
        "fold": fold,
        "k": k,
        "train_config": asdict(train_config),
        "loss_config": asdict(loss_config),
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.history),
        "train_ids": [r.slice_id for r in train],
        "val_ids": [r.slice_id for r in val],
        "test_ids": [r.slice_id for r in test],
    }
    return result, metadata


def history_document(result: FitResult, metadata: dict) -> str:
    doc = {
        "fold": metadata["fold"],
        "best_epoch": result.best_epoch,
        "stopped_early": result.stopped_early,
        "epochs": result.history,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def cross_validated_predictions(manifest: DatasetManifest, models: dict, k: int = 5, seed: int = 0):
    """Predict every slice with the model of the fold that held it out.

    ``models`` maps fold index to a UNet. Returns (slice ids, predictions,
    ground truths) sorted by slice id.
    """
    missing = [f for f in range(k) if f not in models]
    if missing:
        raise ContractError(f"missing checkpoints for folds {missing}")
    folds = stratified_kfold(manifest.records, k, seed)
    out = {}
    for f, records in enumerate(folds):
        if not records:
            continue
        x, y = load_arrays(manifest, records)
        preds = predict_set(models[f], x)
        for r, p, g in zip(records, preds, y):
            if r.slice_id in out:
                raise ContractError(f"slice {r.slice_id} predicted twice")
            out[r.slice_id] = (p, g)
    ids = sorted(out)
    return ids, [out[i][0] for i in ids], [out[i][1] for i in ids]


def evaluate_folds(manifest: DatasetManifest, models: dict, k: int = 5, seed: int = 0) -> MetricsReport:
    _, preds, gts = cross_validated_predictions(manifest, models, k, seed)
    return evaluate_masks(preds, gts)


def infer_image(model: UNet, image) -> tuple:
    """Normalise and segment one slice; returns (mask, PtaResult or None)."""
    x = normalize(image)[None, None]
    mask = model.predict(x)[0]
    try:
        result = mask_pta(mask)
    except ValueError:
        result = None
    return mask, result


# overlay palette: background stays grey; tissue is tinted so the label can be
# decoded back from any pixel (green EL, blue IC, yellow T)


def overlay(image, mask) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    grey = np.zeros(img.shape, dtype=np.uint8) if hi == lo else \
        np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)
    bright = (128 + grey // 2).astype(np.uint8)
    rgb = np.repeat(grey[..., None], 3, axis=2)
    zero = np.zeros_like(grey)
    mask = np.asarray(mask)
    for label, (r, g, b) in {EL: (zero, bright, zero), IC: (zero, zero, bright),
                             T: (bright, bright, zero)}.items():
        sel = mask == label
        rgb[sel] = np.stack([r, g, b], axis=-1)[sel]
    return rgb


def decode_overlay(rgb) -> np.ndarray:
    rgb = np.asarray(rgb).astype(np.int32)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    out = np.zeros(rgb.shape[:2], dtype=np.uint8)
    out[(r == 0) & (b == 0) & (g >= 128)] = EL
    out[(r == 0) & (g == 0) & (b >= 128)] = IC
    out[(b == 0) & (r == g) & (r >= 128)] = T
    return out


def filter_manifest(manifest: DatasetManifest, exclude=()):
    """Apply manual exclusions and the resampling fidelity filter.

    Returns (kept records, decision log). The log has one entry per input
    record with ``severity`` "info" or "error"; records whose files cannot be
    read are dropped with an error entry and processing continues.
    """
    exclude = set(exclude)
    kept, log = [], []
    for r in manifest.records:
        entry = {"slice_id": r.slice_id, "keep": True, "reasons": [], "severity": "info"}
        if r.slice_id in exclude:
            entry["keep"] = False
            entry["reasons"].append("manual exclusion")
        try:
            mask = read_mask(manifest.resolve(r.mask_path))
            if not manifest.resolve(r.image_path).exists():
                raise FileNotFoundError(str(manifest.resolve(r.image_path)))
            if r.source_mask_path:
                source = read_mask(manifest.resolve(r.source_mask_path))
                decision = fidelity_filter(source, mask)
                entry["errors"] = {k: (v if np.isfinite(v) else "inf") for k, v in decision.errors.items()}
                entry["components"] = list(decision.components)
                if not decision.keep:
                    entry["keep"] = False
                    entry["reasons"].extend(decision.reasons)
        except (OSError, ValueError) as exc:
            entry["keep"] = False
            entry["severity"] = "error"
            entry["reasons"].append(f"unreadable: {exc}")
        log.append(entry)
        if entry["keep"]:
            kept.append(r)
    return kept, log
