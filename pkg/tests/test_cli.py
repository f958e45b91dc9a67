import filecmp
import json

import numpy as np
import pytest

from lvnc.cli import main
from lvnc.data import generate_dataset, load_arrays, read_manifest
from lvnc.masks import T, mask_pta
from lvnc.metrics import evaluate_masks
from lvnc.pipeline import decode_overlay, fold_split, overlay
from lvnc.rasters import read_image, read_mask, read_rgb, write_image, write_mask
from lvnc.training import predict_set
from lvnc.unet import load_checkpoint

TRAIN = ["--folds", "2", "--epochs", "2", "--patience", "1", "--depth", "2", "--base-channels", "4"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-phantoms", "--out", str(root / "ds"), "--count", "24", "--size", "16",
                 "--slices-per-patient", "1", "--seed", "5"]) == 0
    man = str(root / "ds" / "manifest.jsonl")
    for fold in (0, 1):
        assert main(["train", "--manifest", man, "--fold", str(fold), "--out", str(root / "ck"),
                     *TRAIN]) == 0
    return root, man


def test_gen_phantoms_is_reproducible_and_empty_count_works(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-phantoms", "--out", str(tmp_path / name), "--count", "5", "--seed", "2",
                     "--size", "16"]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    # only the config echo differs, because it records the output path
    assert cmp.diff_files == ["config_gen-phantoms.json"]
    assert not cmp.subdirs["images"].diff_files and not cmp.subdirs["masks"].diff_files
    assert main(["gen-phantoms", "--out", str(tmp_path / "e"), "--count", "0"]) == 0
    assert len(read_manifest(tmp_path / "e" / "manifest.jsonl")) == 0


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 4, "seed": 9, "size": 16}))
    assert main(["gen-phantoms", "--config", str(cfg), "--out", str(tmp_path / "o"),
                 "--count", "2"]) == 0
    echo = json.loads((tmp_path / "o" / "config_gen-phantoms.json").read_text())
    assert echo["count"] == 2 and echo["seed"] == 9 and echo["size"] == 16
    assert len(read_manifest(tmp_path / "o" / "manifest.jsonl")) == 2


def test_unknown_config_key_is_an_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["gen-phantoms", "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_filter_passthrough_and_log_length(tmp_path):
    generate_dataset(tmp_path / "ds", 6, size=16, seed=1)
    assert main(["filter", "--manifest", str(tmp_path / "ds" / "manifest.jsonl"),
                 "--out", str(tmp_path / "f")]) == 0
    log = (tmp_path / "f" / "decisions.jsonl").read_text().splitlines()
    assert len(log) == 6 and all(json.loads(line)["keep"] for line in log)
    assert len(read_manifest(tmp_path / "f" / "manifest.jsonl")) == 6


def test_filter_discards_topology_change_and_exclusions(tmp_path):
    m = generate_dataset(tmp_path / "ds", 4, size=16, source_size=32, seed=1)
    # replace slice 0 with a constructed case: two trabecular blobs joined by a 1-px bridge
    src = np.full((32, 32), 2, np.uint8)
    src[:4] = 1
    src[10:14, 4:8] = T
    src[10:14, 12:16] = T
    src[10, 8:12] = T
    write_mask(m.resolve(m.records[0].source_mask_path), src)
    from lvnc.masks import resample_mask
    write_mask(m.resolve(m.records[0].mask_path), resample_mask(src, 16))
    (tmp_path / "ex.txt").write_text("S00001\n")
    assert main(["filter", "--manifest", str(tmp_path / "ds" / "manifest.jsonl"),
                 "--exclude", str(tmp_path / "ex.txt"), "--out", str(tmp_path / "f")]) == 0
    log = {e["slice_id"]: e for e in map(json.loads, (tmp_path / "f" / "decisions.jsonl")
                                         .read_text().splitlines())}
    assert "topology" in log["S00000"]["reasons"] and not log["S00000"]["keep"]
    assert log["S00001"]["reasons"][0] == "manual exclusion"
    kept = [r.slice_id for r in read_manifest(tmp_path / "f" / "manifest.jsonl").records]
    assert "S00000" not in kept and "S00001" not in kept


def test_filter_missing_file_is_error_but_continues(tmp_path):
    m = generate_dataset(tmp_path / "ds", 3, size=16, seed=1)
    m.resolve(m.records[1].mask_path).unlink()
    assert main(["filter", "--manifest", str(tmp_path / "ds" / "manifest.jsonl"),
                 "--out", str(tmp_path / "f")]) == 1
    log = [json.loads(x) for x in (tmp_path / "f" / "decisions.jsonl").read_text().splitlines()]
    assert [e["severity"] for e in log] == ["info", "error", "info"]


def test_train_outputs_and_bad_fold(trained, tmp_path):
    root, man = trained
    hist = json.loads((root / "ck" / "fold0_history.json").read_text())
    assert 1 <= len(hist["epochs"]) <= 2
    assert (root / "ck" / "config_train_fold0.json").exists()
    assert main(["train", "--manifest", man, "--fold", "2", "--out", str(tmp_path), *TRAIN]) == 2


def test_evaluate_matches_direct_computation(trained, tmp_path):
    root, man = trained
    assert main(["evaluate", "--manifest", man, "--checkpoints", str(root / "ck"),
                 "--folds", "2", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    manifest = read_manifest(man)
    preds, gts, seen = [], [], []
    for fold in (0, 1):
        model, meta = load_checkpoint(root / "ck" / f"fold{fold}.ckpt")
        _, _, test = fold_split(manifest, fold, 2, 0)
        assert sorted(r.slice_id for r in test) == sorted(meta["test_ids"])
        x, y = load_arrays(manifest, test)
        preds += list(predict_set(model, x))
        gts += list(y)
        seen += [r.slice_id for r in test]
    assert sorted(seen) == sorted(r.slice_id for r in manifest.records)
    direct = evaluate_masks(preds, gts).to_dict()
    assert report["n_slices"] == 24
    for k in ("EL", "IC", "T"):
        assert report["dice"][k]["mean"] == pytest.approx(direct["dice"][k]["mean"])
    assert report["confusion"] == direct["confusion"]


def test_evaluate_ground_truth_as_prediction(trained, tmp_path):
    _, man = trained
    assert main(["evaluate", "--manifest", man, "--ground-truth-as-prediction",
                 "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert all(report["dice"][k]["mean"] == 1.0 for k in ("EL", "IC", "T"))
    assert report["matthews"] == 1.0


def test_evaluate_missing_checkpoint(trained, tmp_path):
    _, man = trained
    assert main(["evaluate", "--manifest", man, "--checkpoints", str(tmp_path),
                 "--out", str(tmp_path)]) == 2


def test_infer_outputs_are_consistent(trained, tmp_path):
    root, man = trained
    img = root / "ds" / "images" / "S00003.pgm"
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n2 2\n255\n")
    status = main(["infer", "--checkpoint", str(root / "ck" / "fold0.ckpt"), "--out",
                   str(tmp_path / "o"), str(img), str(bad)])
    assert status == 1
    doc = json.loads((tmp_path / "o" / "pta.json").read_text())
    assert "error" in doc["bad.pgm"]
    mask = read_mask(tmp_path / "o" / "S00003_mask.pgm")
    assert mask.shape == read_image(img).shape
    entry = doc["S00003.pgm"]
    if entry["pta"] is not None:
        assert entry["pta"] == mask_pta(mask).pta
        assert entry["lvnc_positive"] == mask_pta(mask).positive
    assert np.array_equal(decode_overlay(read_rgb(tmp_path / "o" / "S00003_overlay.ppm")), mask)


def test_overlay_decodes_exactly():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 65535, (20, 20)).astype(np.uint16)
    mask = rng.integers(0, 4, (20, 20)).astype(np.uint8)
    assert np.array_equal(decode_overlay(overlay(img, mask)), mask)
    assert np.array_equal(decode_overlay(overlay(np.zeros((3, 3)), mask[:3, :3])), mask[:3, :3])


def test_bench_defaults(trained, tmp_path):
    root, _ = trained
    assert main(["bench", "--checkpoint", str(root / "ck" / "fold0.ckpt"),
                 "--out", str(tmp_path)]) == 0
    t = json.loads((tmp_path / "timing.json").read_text())
    assert t["warmup_runs"] == 5 and t["timed_runs"] == 100 and len(t["durations_ms"]) == 100
    assert t["deterministic"] is True
    echo = json.loads((tmp_path / "config_bench.json").read_text())
    assert echo["threads"] == 1 and echo["warmup"] == 5 and echo["runs"] == 100
