"""
Command line entry point: ``lvnc <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys match
the long option names, with dashes or underscores); explicit flags win over
the file. Each run writes a ``config_<subcommand>.json`` echo of all
effective values into its output directory.
"""

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import DatasetManifest, generate_dataset, load_arrays, read_manifest, write_manifest
from .errors import ContractError, FormatError
from .losses import LossConfig
from .metrics import benchmark_inference, evaluate_masks, render_report, render_timing
from .pipeline import (cross_validated_predictions, filter_manifest, history_document,
                       infer_image, overlay, train_fold)
from .rasters import read_image, write_mask, write_rgb
from .training import TrainConfig
from .unet import UNetConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("lvnc")

# option name -> default; None means "not set"
DEFAULTS = {
    "gen-phantoms": {"out": None, "count": 200, "slices_per_patient": 3, "patients": None,
                     "theta_min": 0.0, "theta_max": 1.0, "size": 64, "source_size": None,
                     "seed": 0, "threads": None},
    "filter": {"manifest": None, "out": None, "exclude": None, "threads": None},
    "train": {"manifest": None, "fold": None, "out": None, "folds": 5, "seed": 0,
              "epochs": 25, "patience": 5, "batch_size": 2, "lr": 1e-3, "weight_decay": 5e-4,
              "validation_fraction": 0.2, "no_augment": False, "depth": 3, "base_channels": 8,
              "threads": None},
    "evaluate": {"manifest": None, "checkpoints": None, "out": None, "folds": 5, "seed": None,
                 "ground_truth_as_prediction": False, "threads": None},
    "infer": {"checkpoint": None, "images": None, "out": None, "threads": None},
    "bench": {"checkpoint": None, "out": "bench-results", "batch_size": 1, "runs": 100,
              "warmup": 5, "manifest": None, "seed": 0, "threads": 1},
}


def _threads(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n, user_api="blas")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _echo(out_dir, command, opts):
    _write_json(Path(out_dir) / f"config_{command}.json",
                {"command": command, "version": __version__, **opts})


# --------------------------------------------------------------------------


def cmd_gen_phantoms(o):
    out = Path(o["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ContractError(f"cannot write to {out}: {exc}") from exc
    manifest = generate_dataset(out, o["count"], n_patients=o["patients"],
                                slices_per_patient=o["slices_per_patient"],
                                theta_range=(o["theta_min"], o["theta_max"]),
                                size=o["size"], seed=o["seed"], source_size=o["source_size"])
    _echo(out, "gen-phantoms", o)
    pos = sum(r.lvnc_positive for r in manifest.records)
    print(f"wrote {len(manifest)} slices ({pos} LVNC-positive) to {out / 'manifest.jsonl'}")
    return 0


def cmd_filter(o):
    manifest = read_manifest(o["manifest"])
    exclude = []
    if o["exclude"]:
        with open(o["exclude"], encoding="utf-8") as f:
            exclude = [line.strip() for line in f if line.strip() and not line.startswith("#")]
    kept, decisions = filter_manifest(manifest, exclude)
    out = Path(o["out"]) if o["out"] else Path(o["manifest"]).parent / "filtered"
    out.mkdir(parents=True, exist_ok=True)
    filtered = DatasetManifest(kept, {**manifest.metadata, "filtered_from": str(o["manifest"])},
                               manifest.root)
    # keep paths valid relative to the new manifest location
    for r in filtered.records:
        for attr in ("image_path", "mask_path", "source_mask_path"):
            value = getattr(r, attr)
            if value:
                setattr(r, attr, str(manifest.resolve(value).resolve()))
    write_manifest(filtered, out / "manifest.jsonl")
    with open(out / "decisions.jsonl", "w", encoding="utf-8") as f:
        for entry in decisions:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    _echo(out, "filter", o)
    errors = sum(e["severity"] == "error" for e in decisions)
    print(f"kept {len(kept)} of {len(decisions)} slices; {errors} errors; log {out / 'decisions.jsonl'}")
    return 1 if errors else 0


def cmd_train(o):
    manifest = read_manifest(o["manifest"])
    if o["fold"] is None:
        raise ContractError("--fold is required")
    size = int(manifest.metadata.get("size") or load_arrays(manifest, manifest.records[:1])[0].shape[-1])
    unet_config = UNetConfig(depth=o["depth"], base_channels=o["base_channels"], input_size=size)
    train_config = TrainConfig(max_epochs=o["epochs"], patience=o["patience"],
                               batch_size=o["batch_size"], learning_rate=o["lr"],
                               weight_decay=o["weight_decay"],
                               validation_fraction=o["validation_fraction"],
                               augment=not o["no_augment"], seed=o["seed"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    fold = int(o["fold"])
    if not 0 <= fold < o["folds"]:
        raise ContractError(f"fold index {fold} outside 0..{o['folds'] - 1}")
    _echo(out, f"train_fold{fold}", {**o, "unet_config": asdict(unet_config),
                                     "train_config": asdict(train_config)})
    result, meta = train_fold(manifest, fold, o["folds"], unet_config, train_config, LossConfig())
    save_checkpoint(result.model, out / f"fold{fold}.ckpt", meta)
    with open(out / f"fold{fold}_history.json", "w", encoding="utf-8") as f:
        f.write(history_document(result, meta))
    print(f"fold {fold}: {len(result.history)} epochs, best epoch {result.best_epoch}, "
          f"val loss {result.history[result.best_epoch - 1]['val_loss']:.4f}")
    return 0


def cmd_evaluate(o):
    manifest = read_manifest(o["manifest"])
    k = o["folds"]
    if o["ground_truth_as_prediction"]:
        _, gts = load_arrays(manifest)
        report = evaluate_masks(list(gts), list(gts))
        seed = o["seed"] or 0
    else:
        ckdir = Path(o["checkpoints"])
        models, seeds = {}, set()
        for f in range(k):
            path = ckdir / f"fold{f}.ckpt"
            if not path.exists():
                raise ContractError(f"missing checkpoint for fold {f}: {path}")
            model, meta = load_checkpoint(path)
            models[f] = model
            seeds.add(meta.get("train_config", {}).get("seed", 0))
        if o["seed"] is None and len(seeds) != 1:
            raise ContractError("checkpoints were trained with different split seeds")
        seed = o["seed"] if o["seed"] is not None else seeds.pop()
        ids, preds, gts = cross_validated_predictions(manifest, models, k, seed)
        report = evaluate_masks(preds, gts)
    text, doc = render_report(report)
    out = Path(o["out"]) if o["out"] else Path("evaluation")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(doc + "\n", encoding="utf-8")
    _echo(out, "evaluate", {**o, "seed": seed})
    sys.stdout.write(text)
    return 0


def cmd_infer(o):
    model, _ = load_checkpoint(o["checkpoint"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    results, status = {}, 0
    for path in o["images"]:
        path = Path(path)
        try:
            image = read_image(path)
            if image.shape != (model.config.input_size,) * 2:
                raise FormatError(f"image is {image.shape}, model expects "
                                  f"{model.config.input_size}x{model.config.input_size}")
            mask, pta = infer_image(model, image)
        except (OSError, ValueError) as exc:
            log.error("%s: %s", path, exc)
            results[path.name] = {"error": str(exc)}
            status = 1
            continue
        write_mask(out / f"{path.stem}_mask.pgm", mask)
        write_rgb(out / f"{path.stem}_overlay.ppm", overlay(image, mask))
        results[path.name] = {"mask": f"{path.stem}_mask.pgm",
                              "overlay": f"{path.stem}_overlay.ppm",
                              "pta": None if pta is None else pta.pta,
                              "lvnc_positive": None if pta is None else pta.positive}
        print(f"{path.name}: PTA {'undefined' if pta is None else f'{pta.pta:.2f} %'}"
              f"{'' if pta is None else (' LVNC' if pta.positive else ' normal')}")
    _write_json(out / "pta.json", results)
    _echo(out, "infer", {**o, "images": [str(p) for p in o["images"]]})
    return status


def cmd_bench(o):
    model, _ = load_checkpoint(o["checkpoint"])
    s = model.config.input_size
    n = o["batch_size"]
    if o["manifest"]:
        manifest = read_manifest(o["manifest"])
        batch, _ = load_arrays(manifest, manifest.records[:n])
        if len(batch) < n:
            raise ContractError(f"manifest has fewer than {n} slices")
    else:
        batch = np.random.default_rng(o["seed"]).standard_normal((n, model.config.in_channels, s, s))
    report = benchmark_inference(model, batch, runs=o["runs"], warmup=o["warmup"],
                                 threads=o["threads"])
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "timing.json", report.to_dict())
    _echo(out, "bench", o)
    print(render_timing(report))
    if not report.deterministic:
        log.error("timed runs produced different masks")
        return 1
    return 0


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "filter": cmd_filter,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "bench": cmd_bench,
}


def build_parser():
    p = argparse.ArgumentParser(prog="lvnc", description="LV trabeculation segmentation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=None)
        sp.add_argument("--config", help="JSON file of option values")
        sp.add_argument("--threads", type=int, help="BLAS thread cap")
        return sp

    sp = add("gen-phantoms", "write a synthetic phantom dataset")
    sp.add_argument("--out")
    sp.add_argument("--count", type=int)
    sp.add_argument("--slices-per-patient", type=int)
    sp.add_argument("--patients", type=int)
    sp.add_argument("--theta-min", type=float)
    sp.add_argument("--theta-max", type=float)
    sp.add_argument("--size", type=int)
    sp.add_argument("--source-size", type=int, help="also keep masks at this resolution")
    sp.add_argument("--seed", type=int)

    sp = add("filter", "apply manual exclusions and the resampling fidelity filter")
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.add_argument("--exclude", help="text file with one slice id per line")

    sp = add("train", "train one cross-validation fold")
    sp.add_argument("--manifest")
    sp.add_argument("--fold", type=int)
    sp.add_argument("--out")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--patience", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", type=float)
    sp.add_argument("--validation-fraction", type=float)
    sp.add_argument("--no-augment", action="store_true", default=None)
    sp.add_argument("--depth", type=int)
    sp.add_argument("--base-channels", type=int)

    sp = add("evaluate", "score held-out predictions of all folds")
    sp.add_argument("--manifest")
    sp.add_argument("--checkpoints", help="directory holding fold<i>.ckpt files")
    sp.add_argument("--out")
    sp.add_argument("--folds", type=int)
    sp.add_argument("--seed", type=int, help="split seed (default: from checkpoints)")
    sp.add_argument("--ground-truth-as-prediction", action="store_true", default=None)

    sp = add("infer", "segment images and report PTA")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("images", nargs="*")

    sp = add("bench", "time inference: warm-up runs then timed runs")
    sp.add_argument("--checkpoint")
    sp.add_argument("--out")
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--warmup", type=int)
    sp.add_argument("--manifest", help="take the batch from these slices instead of noise")
    sp.add_argument("--seed", type=int)
    return p


REQUIRED = {
    "gen-phantoms": ["out"],
    "filter": ["manifest"],
    "train": ["manifest", "fold", "out"],
    "evaluate": ["manifest"],
    "infer": ["checkpoint", "out", "images"],
    "bench": ["checkpoint"],
}


def resolve_options(args) -> dict:
    """Merge defaults, the optional config file and explicit flags (flags win)."""
    command = args.command
    opts = dict(DEFAULTS[command])
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            from_file = json.load(f)
        for key, value in from_file.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise ContractError(f"unknown option {key!r} in {args.config}")
            opts[key] = value
    for key in opts:
        value = getattr(args, key, None)
        if value is not None and value != []:
            opts[key] = value
    missing = [k for k in REQUIRED[command] if opts.get(k) in (None, [])]
    if missing and not (command == "evaluate" and opts.get("ground_truth_as_prediction")):
        raise ContractError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")
    if command == "evaluate" and not opts["ground_truth_as_prediction"] and not opts["checkpoints"]:
        raise ContractError("--checkpoints is required")
    return opts


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(args)
        with _threads(opts.get("threads")):
            return COMMANDS[args.command](opts)
    except (ContractError, FormatError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
