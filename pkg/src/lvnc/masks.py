"""
Quantification over left-ventricle label masks.

Masks are 2-D integer arrays holding one of four labels per pixel:
0 background, 1 external layer (EL), 2 internal cavity (IC), 3 trabeculae (T).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, UndefinedPTAError

BACKGROUND, EL, IC, T = 0, 1, 2, 3
LABELS = (BACKGROUND, EL, IC, T)
LABEL_NAMES = {BACKGROUND: "background", EL: "EL", IC: "IC", T: "T"}

# LVNC when PTA >= 27.4 %, evaluated exactly as TA * 1000 >= 274 * (TA + ELA)
PTA_THRESHOLD = 27.4
_THRESHOLD_NUM, _THRESHOLD_DEN = 274, 1000

# 8-connectivity
_EIGHT = np.ones((3, 3), dtype=bool)


def check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ContractError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() > 3):
        raise ContractError("mask labels must lie in {0, 1, 2, 3}")
    return mask


@dataclass(frozen=True)
class RegionAreas:
    TA: int
    ELA: int
    ICA: int


@dataclass(frozen=True)
class PtaResult:
    pta: float
    positive: bool

    @classmethod
    def from_value(cls, pta: float) -> "PtaResult":
        return cls(float(pta), bool(pta >= PTA_THRESHOLD))


def region_areas(mask) -> RegionAreas:
    mask = check_mask(mask)
    counts = np.bincount(mask.reshape(-1).astype(np.intp), minlength=4)
    return RegionAreas(TA=int(counts[T]), ELA=int(counts[EL]), ICA=int(counts[IC]))


def pta(areas: RegionAreas) -> PtaResult:
    """Percentage of trabecular area, 100 * TA / (TA + ELA), and the LVNC call.

    The diagnosis uses integer arithmetic so that the 27.4 % boundary is
    inclusive without floating-point surprises.
    """
    ta, ela = int(areas.TA), int(areas.ELA)
    if ta + ela == 0:
        raise UndefinedPTAError("TA + ELA = 0: slice contains no myocardium")
    value = 100.0 * ta / (ta + ela)
    positive = ta * _THRESHOLD_DEN >= _THRESHOLD_NUM * (ta + ela)
    return PtaResult(value, positive)


def mask_pta(mask) -> PtaResult:
    return pta(region_areas(mask))


def connected_components(mask, label: int) -> tuple[int, np.ndarray]:
    """Count 8-connected components of ``label``; ids 1..count follow scan order, 0 elsewhere."""
    mask = check_mask(mask)
    ids, count = ndimage.label(mask == label, structure=_EIGHT)
    return int(count), ids


def resample_mask(mask, new_size) -> np.ndarray:
    """Nearest-neighbour label resampling to ``new_size`` (int or (rows, cols)).

    Output pixel i samples source pixel floor((i + 0.5) * in / out), i.e. the
    source pixel containing the output pixel's centre.
    """
    mask = check_mask(mask)
    rows, cols = (new_size, new_size) if np.isscalar(new_size) else tuple(new_size)
    if rows < 1 or cols < 1:
        raise ContractError("new size must be at least 1")
    h, w = mask.shape
    ri = np.minimum(((np.arange(rows) + 0.5) * h / rows).astype(np.intp), h - 1)
    ci = np.minimum(((np.arange(cols) + 0.5) * w / cols).astype(np.intp), w - 1)
    return mask[np.ix_(ri, ci)]


def _relative_error(orig: float, new: float) -> float:
    if orig == 0:
        return 0.0 if new == 0 else float("inf")
    return abs(new - orig) / abs(orig)


@dataclass
class FidelityDecision:
    keep: bool
    reasons: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    components: tuple = (0, 0)


def _percentages(mask):
    a = region_areas(mask)
    lv = a.TA + a.ELA + a.ICA
    el_pct = 100.0 * a.ELA / lv if lv else 0.0
    t_pct = 100.0 * a.TA / lv if lv else 0.0
    return el_pct, t_pct, pta(a).pta


def fidelity_filter(original, resampled, tolerance: float = 0.05) -> FidelityDecision:
    """Decide whether a resampled ground truth is faithful to its source.

    Discards when the relative error of the EL percentage, T percentage or
    PTA exceeds ``tolerance``, or when the number of trabecular components
    changes. Every violated criterion is listed in ``reasons``.
    """
    original, resampled = check_mask(original), check_mask(resampled)
    reasons, errors = [], {}
    try:
        before = _percentages(original)
        after = _percentages(resampled)
    except UndefinedPTAError:
        reasons.append("undefined PTA")
    else:
        for name, b, a in zip(("EL", "T", "PTA"), before, after):
            err = _relative_error(b, a)
            errors[name] = err
            if err > tolerance:
                reasons.append(f"{name} error")
    cc_before, _ = connected_components(original, T)
    cc_after, _ = connected_components(resampled, T)
    if cc_before != cc_after:
        reasons.append("topology")
    return FidelityDecision(not reasons, reasons, errors, (cc_before, cc_after))
