"""Tracking evaluation: OTB precision/success, VOT-style supervised protocol, comparison tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Protocol, Sequence

import numpy as np

from .data import SequenceDataset
from .errors import ComparisonError, ProtocolError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)  # pixels
SUCCESS_THRESHOLDS = np.arange(21) / 20.0  # k/20 exactly, so 0.15 etc. are the nearest doubles
FAILURE_SKIP = 5
BURN_IN = 10
EAO_INTERVAL = (10, 100)
EAO_NOTE = "EAO approximated over a fixed sequence-length interval, not the dataset-derived VOT interval"


def _boxes(b) -> np.ndarray:
    arr = np.asarray(b, dtype=np.float64)
    return arr[None] if arr.ndim == 1 else arr


def iou(a, b) -> np.ndarray | float:
    """Overlap of (x, y, w, h) boxes; accepts single boxes or aligned (N, 4) arrays."""
    single = np.ndim(a) == 1 and np.ndim(b) == 1
    a, b = _boxes(a), _boxes(b)
    ax1, ay1, ax2, ay2 = a[:, 0], a[:, 1], a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1, bx2, by2 = b[:, 0], b[:, 1], b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0, None)
    inter = iw * ih
    # areas from corner differences so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return float(out[0]) if single else out


def centre_distance(a, b) -> np.ndarray:
    a, b = _boxes(a), _boxes(b)
    return np.hypot(a[:, 0] + a[:, 2] / 2 - b[:, 0] - b[:, 2] / 2, a[:, 1] + a[:, 3] / 2 - b[:, 1] - b[:, 3] / 2)


@dataclass
class OTBResult:
    precision_curve: np.ndarray
    success_curve: np.ndarray
    precision_at_20: float
    auc: float

    def to_dict(self) -> dict:
        return {"precision_curve": self.precision_curve.tolist(), "success_curve": self.success_curve.tolist(),
                "P@20": self.precision_at_20, "AUC": self.auc}


def otb_scores(preds, gts) -> OTBResult:
    """Precision over centre-distance thresholds 0..50 px and success over IoU thresholds 0..1."""
    p, g = _boxes(preds), _boxes(gts)
    if len(p) != len(g):
        raise ProtocolError(f"{len(p)} predictions for {len(g)} ground-truth frames")
    if len(p) == 0:
        raise ProtocolError("no frames to score")
    dist = centre_distance(p, g)
    ov = iou(p, g)
    precision = (dist[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (ov[None, :] >= SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return OTBResult(precision, success, float(precision[20]), float(success.mean()))


# -- VOT-style supervised protocol ---------------------------------------

class Tracker(Protocol):
    def init(self, frame: np.ndarray, box) -> None: ...

    def update(self, frame: np.ndarray): ...


@dataclass
class Run:
    """One initialisation-to-failure (or end-of-sequence) segment."""

    start: int
    overlaps: list[float] = field(default_factory=list)  # one per predicted frame after ``start``
    failed: bool = False


def supervised_runs(tracker: Tracker, dataset: SequenceDataset, skip: int = FAILURE_SKIP) -> list[Run]:
    """Run ``tracker`` with re-initialisation ``skip`` frames after every zero-overlap failure."""
    runs: list[Run] = []
    n = len(dataset)
    start = 0
    while start < n:
        tracker.init(dataset.frames[start], dataset.boxes[start])
        run = Run(start)
        t = start + 1
        while t < n:
            out = tracker.update(dataset.frames[t])
            box = out[0] if isinstance(out, tuple) else out
            o = iou(np.asarray(box, dtype=np.float64), dataset.boxes[t])
            run.overlaps.append(float(o))
            if o <= 0.0:
                run.failed = True
                break
            t += 1
        runs.append(run)
        if not run.failed:
            break
        start = t + skip
    return runs


def run_accuracy_frames(run: Run, burn_in: int = BURN_IN) -> list[float]:
    """Overlaps that count towards accuracy: past the burn-in and not the failure frame."""
    valid = run.overlaps[:-1] if run.failed else run.overlaps
    return valid[burn_in:]


def expected_overlap(runs: Sequence[Run], n_s: int) -> Optional[float]:
    """Mean over qualifying runs of the average overlap over the first ``n_s`` predicted frames.

    Failed runs are zero-padded; runs that reached the sequence end before
    ``n_s`` frames are not comparable at this length and are left out.
    """
    vals = []
    for r in runs:
        if len(r.overlaps) >= n_s:
            vals.append(float(np.sum(r.overlaps[:n_s])) / n_s)
        elif r.failed:
            vals.append(float(np.sum(r.overlaps)) / n_s)
    return float(np.mean(vals)) if vals else None


def eao_from_runs(runs: Sequence[Run], interval=EAO_INTERVAL) -> float:
    lo, hi = interval
    curve = [expected_overlap(runs, n) for n in range(lo, hi + 1)]
    curve = [c for c in curve if c is not None]
    if not curve:
        log.warning("no run qualifies for any length in %s; EAO reported as 0", interval)
        return 0.0
    return float(np.mean(curve))


@dataclass
class VOTResult:
    accuracy: float
    robustness: float
    eao: float
    failures: dict
    per_sequence_accuracy: dict
    excluded: list

    def to_dict(self) -> dict:
        return {"A": self.accuracy, "R": self.robustness, "EAO": self.eao, "failures": self.failures,
                "per_sequence_accuracy": self.per_sequence_accuracy, "excluded": self.excluded}


def vot_from_runs(runs_by_sequence: dict, burn_in: int = BURN_IN, interval=EAO_INTERVAL) -> VOTResult:
    """Aggregate accuracy (mean of per-sequence means), robustness (mean failures) and EAO."""
    per_seq_acc = {}
    failures = {}
    pooled: list[Run] = []
    for name in sorted(runs_by_sequence):
        runs = runs_by_sequence[name]
        failures[name] = int(sum(r.failed for r in runs))
        frames = [o for r in runs for o in run_accuracy_frames(r, burn_in)]
        if frames:
            per_seq_acc[name] = float(np.mean(frames))
        pooled.extend(runs)
    acc = float(np.mean(list(per_seq_acc.values()))) if per_seq_acc else 0.0
    rob = float(np.mean(list(failures.values()))) if failures else 0.0
    return VOTResult(acc, rob, eao_from_runs(pooled, interval), failures, per_seq_acc, [])


def vot_scores(tracker: Tracker, datasets: Iterable[SequenceDataset], burn_in: int = BURN_IN,
               skip: int = FAILURE_SKIP, interval=EAO_INTERVAL) -> VOTResult:
    """Supervised-protocol Accuracy / Robustness / EAO over ``datasets``."""
    if isinstance(datasets, SequenceDataset):
        datasets = [datasets]
    runs_by_seq = {}
    excluded = []
    for ds in datasets:
        if len(ds) <= burn_in + 1:
            log.warning("%s: %d frames is not longer than the burn-in; excluded", ds.name, len(ds))
            excluded.append(ds.name)
            continue
        runs_by_seq[ds.name] = supervised_runs(tracker, ds, skip)
    result = vot_from_runs(runs_by_seq, burn_in, interval)
    result.excluded = excluded
    return result


# -- reports ---------------------------------------------------------------

def make_report(protocol: str, dataset: str, per_sequence: dict, aggregate: dict, checkpoint: str = "",
                seed: Optional[int] = None) -> dict:
    report = {"schema": SCHEMA_VERSION, "protocol": protocol, "dataset": dataset, "checkpoint": checkpoint,
              "seed": seed, "per_sequence": per_sequence, "aggregate": aggregate}
    if protocol == "vot":
        report["eao_interval"] = list(EAO_INTERVAL)
        report["note"] = EAO_NOTE
    return report


def otb_report(preds_by_seq: dict, gts_by_seq: dict, dataset: str = "", checkpoint: str = "",
               seed: Optional[int] = None) -> dict:
    """Per-sequence and frame-pooled OTB scores."""
    missing = sorted(set(gts_by_seq) - set(preds_by_seq))
    if missing:
        raise ProtocolError(f"no predictions for sequences: {missing}")
    per_seq = {}
    all_p, all_g = [], []
    for name in sorted(gts_by_seq):
        res = otb_scores(preds_by_seq[name], gts_by_seq[name])
        per_seq[name] = {"P@20": res.precision_at_20, "AUC": res.auc}
        all_p.append(_boxes(preds_by_seq[name]))
        all_g.append(_boxes(gts_by_seq[name]))
    pooled = otb_scores(np.concatenate(all_p), np.concatenate(all_g))
    agg = {"P@20": pooled.precision_at_20, "AUC": pooled.auc,
           "mean_sequence_AUC": float(np.mean([v["AUC"] for v in per_seq.values()]))}
    return make_report("otb", dataset, per_seq, agg, checkpoint, seed)


def vot_report(result: VOTResult, dataset: str = "", checkpoint: str = "", seed: Optional[int] = None) -> dict:
    per_seq = {name: {"A": result.per_sequence_accuracy.get(name), "failures": f}
               for name, f in result.failures.items()}
    agg = {"A": result.accuracy, "R": result.robustness, "EAO": result.eao, "excluded": result.excluded}
    return make_report("vot", dataset, per_seq, agg, checkpoint, seed)


def relative_gain(base: float, new: float, digits: int = 1) -> Optional[float]:
    """Percentage change from ``base`` to ``new`` rounded to ``digits`` decimals (None when base is 0)."""
    if base == 0:
        return None
    return round((new - base) / base * 100.0, digits)


def compare_report(baseline: dict, adapted: dict) -> dict:
    """Absolute and relative deltas for every shared numeric aggregate metric."""
    for key in ("protocol", "dataset"):
        if baseline.get(key) != adapted.get(key):
            raise ComparisonError(f"reports differ in {key}: {baseline.get(key)!r} vs {adapted.get(key)!r}")
    rows = {}
    for metric, b in baseline["aggregate"].items():
        a = adapted["aggregate"].get(metric)
        if isinstance(b, (int, float)) and isinstance(a, (int, float)) and not isinstance(b, bool):
            rows[metric] = {"baseline": float(b), "adapted": float(a), "delta": float(a) - float(b),
                            "relative_pct": relative_gain(float(b), float(a))}
    return {"schema": SCHEMA_VERSION, "protocol": baseline.get("protocol"), "dataset": baseline.get("dataset"),
            "metrics": rows}


def _fmt(v, spec="{:.3f}") -> str:
    return "-" if v is None else spec.format(v)


def render_table(rows: Sequence[tuple[str, dict]]) -> str:
    """Plain-text table with columns A, R, EAO and the EAO deltas, one row per (label, comparison)."""
    header = f"{'model':<16}{'A':>8}{'R':>8}{'EAO':>8}{'dEAO':>9}{'dEAO%':>8}"
    lines = [header, "-" * len(header)]
    for label, cmp_ in rows:
        m = cmp_["metrics"]
        for side in ("baseline", "adapted"):
            a = m.get("A", {}).get(side)
            r = m.get("R", {}).get(side)
            e = m.get("EAO", {}).get(side)
            d = m.get("EAO", {}).get("delta") if side == "adapted" else None
            pct = m.get("EAO", {}).get("relative_pct") if side == "adapted" else None
            name = f"{label}:{side}" if label else side
            lines.append(f"{name:<16}{_fmt(a):>8}{_fmt(r, '{:.2f}'):>8}{_fmt(e):>8}"
                         f"{_fmt(d, '{:+.3f}'):>9}{_fmt(pct, '{:+.1f}'):>8}")
    return "\n".join(lines) + "\n"


def report_csv(report: dict) -> str:
    """Per-sequence rows followed by an ``ALL`` aggregate row."""
    metrics = sorted({k for v in report["per_sequence"].values() for k in v})
    lines = ["sequence," + ",".join(metrics)]

    def cell(v):
        return "" if v is None else repr(float(v)) if isinstance(v, (int, float)) else str(v)

    for name in sorted(report["per_sequence"]):
        row = report["per_sequence"][name]
        lines.append(name + "," + ",".join(cell(row.get(m)) for m in metrics))
    agg = report["aggregate"]
    lines.append("ALL," + ",".join(cell(agg.get(m)) if not isinstance(agg.get(m), list) else "" for m in metrics))
    return "\n".join(lines) + "\n"
