"""
Segmentation and diagnosis metrics, inference timing and report rendering.
"""

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError, DimensionError, UndefinedPTAError
from .masks import EL, IC, T, PtaResult, mask_pta

REGIONS = {"EL": EL, "IC": IC, "T": T}


def dice(pred, gt, label: int) -> float:
    """2|P & G| / (|P| + |G|) for one label; 1.0 when the label is absent from both."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p, g = pred == label, gt == label
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def pta_error(pred, gt) -> float:
    """Absolute PTA difference in percentage points; raises UndefinedPTAError if either PTA is undefined."""
    return abs(mask_pta(pred).pta - mask_pta(gt).pta)


@dataclass
class Confusion:
    TP: int = 0
    FP: int = 0
    TN: int = 0
    FN: int = 0

    @property
    def n(self):
        return self.TP + self.FP + self.TN + self.FN


def confusion(predictions, truths) -> Confusion:
    c = Confusion()
    for p, t in zip(predictions, truths):
        p = p.positive if isinstance(p, PtaResult) else bool(p)
        t = t.positive if isinstance(t, PtaResult) else bool(t)
        if p and t:
            c.TP += 1
        elif p:
            c.FP += 1
        elif t:
            c.FN += 1
        else:
            c.TN += 1
    return c


def matthews(c: Confusion) -> float:
    denom = (c.TP + c.FP) * (c.TP + c.FN) * (c.TN + c.FP) * (c.TN + c.FN)
    if denom == 0:
        return 0.0
    return (c.TP * c.TN - c.FP * c.FN) / math.sqrt(denom)


def _ratio(num, den):
    return num / den if den else None


def diagnosis_metrics(predictions, truths) -> dict:
    """Accuracy, Matthews coefficient, recall and specificity of slice-level LVNC calls.

    Recall (specificity) is None when the truth has no positives (negatives).
    """
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise ContractError("predictions and truths differ in length")
    if not predictions:
        raise ContractError("no slices to score")
    c = confusion(predictions, truths)
    return {
        "confusion": asdict(c),
        "accuracy": (c.TP + c.TN) / c.n,
        "matthews": matthews(c),
        "recall": _ratio(c.TP, c.TP + c.FN),
        "specificity": _ratio(c.TN, c.TN + c.FP),
    }


def _summary(values):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(values.size)}


@dataclass
class TimingReport:
    warmup_runs: int
    timed_runs: int
    durations_ms: list
    batch_size: int
    threads: Optional[int] = None
    deterministic: bool = True

    @property
    def mean_ms(self) -> float:
        return float(np.mean(self.durations_ms)) if self.durations_ms else float("nan")

    @property
    def std_ms(self) -> float:
        return float(np.std(self.durations_ms)) if self.durations_ms else float("nan")

    @property
    def per_slice_mean_ms(self) -> float:
        return self.mean_ms / self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_ms"] = self.mean_ms if self.durations_ms else None
        d["std_ms"] = self.std_ms if self.durations_ms else None
        d["per_slice_mean_ms"] = self.per_slice_mean_ms if self.durations_ms else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TimingReport":
        keys = ("warmup_runs", "timed_runs", "durations_ms", "batch_size", "threads", "deterministic")
        return cls(**{k: d[k] for k in keys})


@dataclass
class MetricsReport:
    n_slices: int = 0
    dice: dict = field(default_factory=lambda: {k: _summary([]) for k in REGIONS})
    pta_error: dict = field(default_factory=lambda: {**_summary([]), "excluded": 0})
    confusion: dict = field(default_factory=lambda: asdict(Confusion()))
    accuracy: Optional[float] = None
    matthews: Optional[float] = None
    recall: Optional[float] = None
    specificity: Optional[float] = None
    timing: Optional[TimingReport] = None

    def to_dict(self) -> dict:
        d = {
            "n_slices": self.n_slices,
            "dice": self.dice,
            "pta_error": self.pta_error,
            "confusion": self.confusion,
            "accuracy": self.accuracy,
            "matthews": self.matthews,
            "recall": self.recall,
            "specificity": self.specificity,
            "timing": self.timing.to_dict() if self.timing else None,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        timing = TimingReport.from_dict(d["timing"]) if d.get("timing") else None
        return cls(d["n_slices"], d["dice"], d["pta_error"], d["confusion"], d["accuracy"],
                   d["matthews"], d["recall"], d["specificity"], timing)


def evaluate_masks(preds, gts) -> MetricsReport:
    """Aggregate Dice, PTA error and diagnosis metrics over paired masks.

    Slices with undefined PTA on either side are excluded from the PTA error
    and diagnosis statistics and counted in ``pta_error["excluded"]``.
    """
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ContractError("prediction and ground-truth lists differ in length")
    report = MetricsReport(n_slices=len(preds))
    if not preds:
        return report
    report.dice = {name: _summary([dice(p, g, lab) for p, g in zip(preds, gts)])
                   for name, lab in REGIONS.items()}
    errors, pred_res, true_res, excluded = [], [], [], 0
    for p, g in zip(preds, gts):
        try:
            rp, rg = mask_pta(p), mask_pta(g)
        except UndefinedPTAError:
            excluded += 1
            continue
        errors.append(abs(rp.pta - rg.pta))
        pred_res.append(rp)
        true_res.append(rg)
    report.pta_error = {**_summary(errors), "excluded": excluded}
    if pred_res:
        dm = diagnosis_metrics(pred_res, true_res)
        report.confusion = dm["confusion"]
        report.accuracy = dm["accuracy"]
        report.matthews = dm["matthews"]
        report.recall = dm["recall"]
        report.specificity = dm["specificity"]
    return report


# --------------------------------------------------------------------------
# timing


def _blas_threads():
    try:
        from threadpoolctl import threadpool_info
    except ImportError:
        return None
    counts = [i.get("num_threads") for i in threadpool_info() if i.get("user_api") == "blas"]
    return max(counts) if counts else None


def benchmark_inference(model, batch, runs: int = 100, warmup: int = 5,
                        threads: Optional[int] = None) -> TimingReport:
    """Time ``runs`` inference calls after ``warmup`` untimed ones.

    ``model`` is either an object with a ``predict`` method or a callable
    mapping a batch to label masks. ``threads`` caps BLAS threads inside the
    measured region (all runs use the same cap). Every timed output is
    compared against the warm-up output; ``deterministic`` records the result.
    """
    predict = model.predict if hasattr(model, "predict") else model
    batch = np.asarray(batch, dtype=np.float64)
    if threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=threads, user_api="blas")
    else:
        limiter = None
    try:
        reference = None
        for _ in range(warmup):
            reference = predict(batch)
        durations, same = [], True
        for _ in range(runs):
            t0 = time.perf_counter_ns()
            out = predict(batch)
            durations.append((time.perf_counter_ns() - t0) / 1e6)
            if reference is None:
                reference = out
            same = same and np.array_equal(out, reference)
        used = _blas_threads()
    finally:
        if limiter is not None:
            limiter.unregister()
    return TimingReport(warmup, runs, durations, int(batch.shape[0]), used, bool(same))


# --------------------------------------------------------------------------
# rendering


def _fmt_pair(summary, digits=3):
    if not summary or not summary.get("n"):
        return "n=0"
    return f"{summary['mean']:.{digits}f} ({summary['std']:.{digits}f})"


def _fmt(value, digits=3):
    return "n=0" if value is None else f"{value:.{digits}f}"


def render_text(report: MetricsReport) -> str:
    lines = [f"slices: {report.n_slices}", "",
             "Segmentation  mean (std)",
             f"{'Dice EL':<14}{_fmt_pair(report.dice.get('EL'))}",
             f"{'Dice IC':<14}{_fmt_pair(report.dice.get('IC'))}",
             f"{'Dice T':<14}{_fmt_pair(report.dice.get('T'))}",
             f"{'PTA error':<14}{_fmt_pair(report.pta_error, 2)}"
             f"   excluded={report.pta_error.get('excluded', 0)}",
             "", "Diagnosis (PTA >= 27.4 %)"]
    if report.accuracy is None:
        lines.append("n=0")
    else:
        c = report.confusion
        lines += [f"{'TP FP TN FN':<14}{c['TP']} {c['FP']} {c['TN']} {c['FN']}",
                  f"{'Accuracy':<14}{_fmt(report.accuracy)}",
                  f"{'Matthews':<14}{_fmt(report.matthews)}",
                  f"{'Recall':<14}{_fmt(report.recall)}",
                  f"{'Specificity':<14}{_fmt(report.specificity)}"]
    if report.timing is not None:
        lines += ["", render_timing(report.timing)]
    return "\n".join(lines) + "\n"


def render_timing(t: TimingReport) -> str:
    if not t.durations_ms:
        return f"Inference time  n=0 (warm-up {t.warmup_runs})"
    return (f"Inference time (ms, batch {t.batch_size}, {t.timed_runs} runs after "
            f"{t.warmup_runs} warm-up, threads {t.threads}): "
            f"{t.mean_ms:.3f} ({t.std_ms:.3f})  per slice {t.per_slice_mean_ms:.3f}")


def render_report(report: MetricsReport) -> tuple[str, str]:
    """Return (text table, JSON document)."""
    return render_text(report), json.dumps(report.to_dict(), indent=2)


def parse_report(document: str) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(document))
