"""
Datasets of short-axis slices: synthetic phantoms, manifests, preprocessing
and patient-level stratified folds.
"""

import json
import os
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ContractError, FormatError
from .masks import EL, IC, T, PtaResult, mask_pta
from .rasters import read_image, read_mask, write_image, write_mask

SLICE_POSITIONS = ("basal", "mid", "apical")


# --------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomParams:
    size: int = 64
    center: tuple = (32.0, 32.0)
    inner_radius: float = 13.0
    outer_radius: float = 19.0
    theta: float = 0.5
    # mean intensity for background, EL, IC, T
    means: tuple = (0.15, 0.40, 0.90, 0.62)
    noise_std: float = 0.04
    bias_strength: float = 0.15
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ContractError(f"theta must lie in [0, 1], got {self.theta}")
        if not 0 < self.inner_radius < self.outer_radius < self.size / 2:
            raise ContractError("need 0 < inner radius < outer radius < size / 2")
        cy, cx = self.center
        if not (self.outer_radius <= cy <= self.size - self.outer_radius
                and self.outer_radius <= cx <= self.size - self.outer_radius):
            raise ContractError("ventricle does not fit inside the image")
        if self.noise_std < 0:
            raise ContractError("noise_std must be non-negative")


def _wobble(rng, phi, amplitude):
    # smooth random radial modulation built from low harmonics
    out = np.zeros_like(phi)
    for k in (2, 3, 4):
        out += amplitude / k * np.sin(k * phi + rng.uniform(0, 2 * np.pi))
    return out


def generate_phantom(params: PhantomParams):
    """Synthesize one slice; returns (uint16 image, uint8 mask, PtaResult or None).

    The mask is the exact generator geometry: an external-layer annulus with a
    wobbling boundary, trabecular protrusions from the wall into the cavity
    (their number and thickness grow with ``theta``), detached trabecular
    islands, and the remaining cavity. PTA is None only if the slice has no
    myocardium, which valid parameters never produce.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    s = params.size
    unit = s / 64.0
    cy, cx = params.center
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx)

    r_in = params.inner_radius * (1 + _wobble(rng, phi, 0.05))
    r_out = params.outer_radius * (1 + _wobble(rng, phi, 0.04))
    r_out = np.maximum(r_out, r_in + 1.5 * unit)
    wall = (rho >= r_in) & (rho < r_out)
    cavity = rho < r_in

    theta = params.theta
    trab = np.zeros((s, s), dtype=bool)
    n_protrusions = int(round(20 * theta))
    for _ in range(n_protrusions):
        ang = rng.uniform(-np.pi, np.pi)
        ux, uy = np.cos(ang), np.sin(ang)
        length = params.inner_radius * rng.uniform(0.3, 0.5 + 0.3 * theta)
        half_base = unit * rng.uniform(1.2, 2.0 + 2.2 * theta)
        along = dx * ux + dy * uy
        across = np.abs(-dx * uy + dy * ux)
        # depth below the local inner wall, measured along the protrusion axis
        depth = params.inner_radius - along
        taper = half_base * (1.0 - 0.5 * np.clip(depth / length, 0, 1))
        trab |= cavity & (along > 0) & (depth <= length) & (across <= taper)
    n_islands = int(round(4 * theta))
    for _ in range(n_islands):
        ang = rng.uniform(-np.pi, np.pi)
        dist = params.inner_radius - unit * rng.uniform(3.0, 6.0)
        py, px = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
        radius = unit * rng.uniform(0.8, 1.5 + theta)
        trab |= cavity & (np.hypot(yy - py, xx - px) <= radius)

    mask = np.zeros((s, s), dtype=np.uint8)
    mask[wall] = EL
    mask[cavity] = IC
    mask[trab] = T

    means = np.asarray(params.means, dtype=np.float64)
    clean = means[mask]
    # multiplicative bias field: random planar ramp plus one smooth bump
    g = rng.normal(size=2)
    g /= np.linalg.norm(g) + 1e-12
    ramp = ((yy - s / 2) * g[0] + (xx - s / 2) * g[1]) / s
    by, bx = rng.uniform(0, s, size=2)
    bump = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * (0.35 * s) ** 2)) - 0.5
    bias = 1 + params.bias_strength * (ramp + 0.5 * bump)
    intensity = clean * bias + rng.normal(0, params.noise_std, size=(s, s))
    gain = rng.uniform(2000, 6000)
    offset = rng.uniform(100, 1500)
    image = np.clip(np.round(intensity * gain + offset), 0, 65535).astype(np.uint16)

    try:
        result = mask_pta(mask)
    except ValueError:
        result = None
    return image, mask, result


def random_phantom_params(rng, size=64, theta=None, position="mid", seed=None) -> PhantomParams:
    """Draw plausible geometry for a slice at ``position``."""
    unit = size / 64.0
    shrink = {"basal": 1.0, "mid": 0.92, "apical": 0.78}[position]
    outer = unit * rng.uniform(17.5, 21.0) * shrink
    thickness = unit * rng.uniform(4.5, 6.5) * (0.9 + 0.1 * shrink)
    inner = outer - thickness
    margin = outer + unit
    cy = rng.uniform(max(margin, size / 2 - 3 * unit), min(size - margin, size / 2 + 3 * unit))
    cx = rng.uniform(max(margin, size / 2 - 3 * unit), min(size - margin, size / 2 + 3 * unit))
    if theta is None:
        theta = rng.uniform(0, 1)
    return PhantomParams(
        size=size, center=(cy, cx), inner_radius=inner, outer_radius=outer,
        theta=float(theta), seed=int(rng.integers(2**31)) if seed is None else seed,
    )


# --------------------------------------------------------------------------
# manifests


@dataclass
class SliceRecord:
    slice_id: str
    patient_id: str
    image_path: str
    mask_path: str
    lvnc_positive: bool
    slice_position: Optional[str] = None
    source_mask_path: Optional[str] = None

    def __post_init__(self):
        if self.slice_position is not None and self.slice_position not in SLICE_POSITIONS:
            raise ContractError(f"unknown slice position {self.slice_position!r}")


MANIFEST_KEYS = [f.name for f in fields(SliceRecord)]


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    root: Path = Path(".")

    def __post_init__(self):
        ids = [r.slice_id for r in self.records]
        if len(ids) != len(set(ids)):
            raise ContractError("slice ids must be unique")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, relpath) -> Path:
        p = Path(relpath)
        return p if p.is_absolute() else self.root / p

    def by_patient(self) -> dict:
        groups = {}
        for r in self.records:
            groups.setdefault(r.patient_id, []).append(r)
        return groups

    def subset(self, records) -> "DatasetManifest":
        return DatasetManifest(list(records), dict(self.metadata), self.root)

    def load(self, record: SliceRecord):
        return load_slice(self.resolve(record.image_path), self.resolve(record.mask_path))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def write_manifest(manifest: DatasetManifest, path) -> None:
    """One JSON object per line with keys in ``MANIFEST_KEYS`` order; metadata in a sidecar."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for r in manifest.records:
            row = asdict(r)
            f.write(json.dumps({k: row[k] for k in MANIFEST_KEYS}) + "\n")
    with open(_meta_path(path), "w", encoding="utf-8") as f:
        json.dump(manifest.metadata, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(SliceRecord(**{k: row.get(k) for k in MANIFEST_KEYS}))
            except (json.JSONDecodeError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest row") from exc
    meta = {}
    if _meta_path(path).exists():
        with open(_meta_path(path), encoding="utf-8") as f:
            meta = json.load(f)
    return DatasetManifest(records, meta, path.parent)


def save_slice(image_path, mask_path, image, mask) -> None:
    image, mask = np.asarray(image), np.asarray(mask)
    if image.shape != mask.shape:
        raise FormatError(f"image {image.shape} and mask {mask.shape} differ in size")
    write_image(image_path, image)
    write_mask(mask_path, mask)


def load_slice(image_path, mask_path):
    image = read_image(image_path)
    mask = read_mask(mask_path)
    if image.shape != mask.shape:
        raise FormatError(f"image {image.shape} and mask {mask.shape} differ in size")
    return image, mask


def downsample_image(image, size: int) -> np.ndarray:
    """Block-average a uint16 image by an integer factor."""
    image = np.asarray(image)
    f = image.shape[0] // size
    if f * size != image.shape[0] or image.shape[0] != image.shape[1]:
        raise ContractError("image size must be an integer multiple of the target size")
    blocks = image.reshape(size, f, size, f).astype(np.float64).mean(axis=(1, 3))
    return np.round(blocks).astype(np.uint16)


def generate_dataset(out_dir, n_slices, n_patients=None, slices_per_patient=3,
                     theta_range=(0.0, 1.0), size=64, seed=0,
                     source_size: Optional[int] = None) -> DatasetManifest:
    """Write ``n_slices`` phantom slices grouped into synthetic patients.

    Each patient has its own trabeculation level drawn from ``theta_range``;
    its slices scatter around it. With ``source_size`` (a multiple of
    ``size``) phantoms are drawn at that resolution, the full-resolution mask
    is kept as ``source_mask_path`` and the training pair is resampled to
    ``size``. Returns the manifest (also written to ``out_dir/manifest.jsonl``).
    """
    from .masks import resample_mask

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    if source_size is not None:
        if source_size % size:
            raise ContractError("source_size must be a multiple of size")
        (out_dir / "source_masks").mkdir(parents=True, exist_ok=True)
    gen_size = source_size or size
    if n_patients is None:
        n_patients = -(-n_slices // slices_per_patient) if n_slices else 0
    if n_slices and n_patients < 1:
        raise ContractError("need at least one patient")
    sizes = [len(a) for a in np.array_split(np.arange(n_slices), n_patients)] if n_slices else []
    rng = np.random.default_rng(seed)
    lo, hi = theta_range
    records = []
    k = 0
    for p, count in enumerate(sizes):
        pid = f"P{p:04d}"
        theta_p = rng.uniform(lo, hi)
        for j in range(count):
            position = SLICE_POSITIONS[j % 3]
            theta = float(np.clip(theta_p + rng.normal(0, 0.08), lo, hi))
            params = random_phantom_params(rng, gen_size, theta, position)
            image, mask, result = generate_phantom(params)
            sid = f"S{k:05d}"
            img_rel, mask_rel = f"images/{sid}.pgm", f"masks/{sid}.pgm"
            src_rel = None
            if source_size is not None:
                src_rel = f"source_masks/{sid}.pgm"
                write_mask(out_dir / src_rel, mask)
                image = downsample_image(image, size)
                mask = resample_mask(mask, size)
                result = mask_pta(mask)
            save_slice(out_dir / img_rel, out_dir / mask_rel, image, mask)
            records.append(SliceRecord(sid, pid, img_rel, mask_rel, bool(result.positive),
                                       position, src_rel))
            k += 1
    manifest = DatasetManifest(records, {
        "generator": "phantom",
        "size": size,
        "seed": seed,
        "n_patients": len(sizes),
        "theta_range": [lo, hi],
        "pixel_size_mm": 1.5 * 256 / size,
        "source_size": source_size,
    }, out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


# --------------------------------------------------------------------------
# preprocessing


def normalize(image) -> np.ndarray:
    """Zero-mean, unit-variance copy of a slice."""
    x = np.asarray(image, dtype=np.float64)
    std = x.std()
    if not std > 0:
        raise ContractError("cannot normalise a constant image")
    return (x - x.mean()) / std


ROTATION_PROBABILITY = 0.25


def draw_rotation(rng) -> int:
    """Number of quarter turns: 0 with probability 0.75, else uniform over 1, 2, 3."""
    if rng.random() < ROTATION_PROBABILITY:
        return int(rng.integers(1, 4))
    return 0


def augment(image, mask, rng):
    """Jointly rotate an image and its mask by the same random multiple of 90 degrees."""
    image, mask = np.asarray(image), np.asarray(mask)
    if image.ndim != 2 or image.shape[0] != image.shape[1] or image.shape != mask.shape:
        raise ContractError("augment needs square image and mask of equal size")
    k = draw_rotation(rng)
    return np.rot90(image, k).copy(), np.rot90(mask, k).copy()


# --------------------------------------------------------------------------
# folds


def stratified_kfold(records, k: int = 5, seed: int = 0) -> list:
    """Split records into ``k`` patient-disjoint folds with balanced LVNC prevalence.

    Patients are visited largest first (random order among equal sizes) and
    each goes to the fold that keeps positive-slice counts closest to their
    targets, among folds where adding it keeps the spread of fold sizes
    within the largest patient's slice count.
    """
    records = list(records)
    if k < 2:
        raise ContractError("need at least two folds")
    groups = {}
    for r in records:
        groups.setdefault(r.patient_id, []).append(r)
    if len(groups) < k:
        raise ContractError(f"{len(groups)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    pids = list(groups)
    order = rng.permutation(len(pids))
    pids = [pids[i] for i in order]
    pids.sort(key=lambda p: -len(groups[p]))
    largest = len(groups[pids[0]])

    n_total = len(records)
    pos_total = sum(r.lvnc_positive for r in records)
    sizes = np.zeros(k, dtype=int)
    pos = np.zeros(k, dtype=int)
    assignment = [[] for _ in range(k)]
    for pid in pids:
        recs = groups[pid]
        n, npos = len(recs), sum(r.lvnc_positive for r in recs)
        best, best_cost = None, None
        for f in range(k):
            if sizes[f] + n - sizes.min() > largest:
                continue
            new_sizes = sizes.copy()
            new_pos = pos.copy()
            new_sizes[f] += n
            new_pos[f] += npos
            # deviation of per-fold positive counts from a proportional share
            share = new_sizes * pos_total / n_total
            cost = np.abs(new_pos - share).sum() + 1e-3 * new_sizes[f]
            if best_cost is None or cost < best_cost - 1e-12:
                best, best_cost = f, cost
        sizes[best] += n
        pos[best] += npos
        assignment[best].append(pid)

    _refine(assignment, groups, largest, pos_total / n_total if n_total else 0.0)
    folds = [[r for pid in assignment[f] for r in groups[pid]] for f in range(k)]
    if n_total and pos_total:
        rate = pos_total / n_total
        worst = max(abs(sum(r.lvnc_positive for r in f) / len(f) - rate) for f in folds if f)
        if worst > 0.05:
            warnings.warn(f"stratification imperfect: fold positive rate deviates by {worst:.3f}")
    return folds


def _fold_score(sizes, pos, rate):
    rates = np.where(sizes > 0, pos / np.maximum(sizes, 1), rate)
    dev = np.abs(rates - rate)
    return dev.max(), float((dev ** 2).sum())


def _refine(assignment, groups, largest, rate, max_passes=20):
    """Improve a fold assignment by patient moves and swaps that lower the worst
    per-fold prevalence deviation, keeping the fold-size spread within ``largest``."""
    k = len(assignment)
    stats = {p: (len(g), sum(r.lvnc_positive for r in g)) for p, g in groups.items()}
    sizes = np.array([sum(stats[p][0] for p in a) for a in assignment])
    pos = np.array([sum(stats[p][1] for p in a) for a in assignment])
    best = _fold_score(sizes, pos, rate)

    def try_change(fa, fb, dn, dp):
        # move dn slices / dp positives from fold fa to fold fb
        ns, np_ = sizes.copy(), pos.copy()
        ns[fa] -= dn
        ns[fb] += dn
        np_[fa] -= dp
        np_[fb] += dp
        if ns.min() <= 0 or ns.max() - ns.min() > largest:
            return None
        return ns, np_, _fold_score(ns, np_, rate)

    for _ in range(max_passes):
        improved = False
        for fa in range(k):
            for fb in range(k):
                if fa == fb:
                    continue
                for pa in list(assignment[fa]):
                    na, qa = stats[pa]
                    res = try_change(fa, fb, na, qa)
                    if res and res[2] < best:
                        sizes, pos, best = res
                        assignment[fa].remove(pa)
                        assignment[fb].append(pa)
                        improved = True
                        continue
                    for pb in list(assignment[fb]):
                        nb, qb = stats[pb]
                        res = try_change(fa, fb, na - nb, qa - qb)
                        if res and res[2] < best:
                            sizes, pos, best = res
                            assignment[fa].remove(pa)
                            assignment[fb].remove(pb)
                            assignment[fa].append(pb)
                            assignment[fb].append(pa)
                            improved = True
                            break
        if not improved:
            break


def train_val_split(records, validation_fraction: float = 0.2, seed: int = 0):
    """Patient-disjoint stratified split with roughly ``validation_fraction`` held out."""
    if not 0 < validation_fraction < 1:
        raise ContractError("validation_fraction must lie in (0, 1)")
    k = max(2, int(round(1 / validation_fraction)))
    folds = stratified_kfold(records, k, seed)
    val = folds[0]
    train = [r for f in folds[1:] for r in f]
    return train, val


def load_arrays(manifest: DatasetManifest, records=None):
    """Stack normalised images (N, 1, S, S) and masks (N, S, S) for ``records``."""
    records = manifest.records if records is None else records
    images, masks = [], []
    for r in records:
        img, m = manifest.load(r)
        images.append(normalize(img))
        masks.append(m)
    if not images:
        return np.zeros((0, 1, 0, 0)), np.zeros((0, 0, 0), dtype=np.uint8)
    return np.stack(images)[:, None], np.stack(masks)


def default_workers() -> int:
    return os.cpu_count() or 1
