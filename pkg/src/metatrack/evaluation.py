"""OTB-style one-pass evaluation: IoU, success curves, AUC, reports."""
from __future__ import annotations

import csv
import glob
import io
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .synthdata import Sequence, load_frame
from .tracker import run_sequence

log = logging.getLogger(__name__)

THRESHOLDS = np.round(np.linspace(0.0, 1.0, 21), 2)


def iou(a, b):
    """Intersection over union of (x, y, w, h) boxes; broadcasts over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ix = np.maximum(0.0, np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2])
                    - np.maximum(a[..., 0], b[..., 0]))
    iy = np.maximum(0.0, np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3])
                    - np.maximum(a[..., 1], b[..., 1]))
    inter = ix * iy
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out if out.ndim else float(out)


def success_auc(ious, thresholds=THRESHOLDS):
    """Success curve (fraction of frames with IoU >= tau) and its mean over the grid."""
    ious = np.asarray(ious, dtype=np.float64)
    curve = np.array([(ious >= t).mean() if ious.size else 0.0 for t in thresholds])
    return curve, float(curve.mean())


def center_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca = a[..., :2] + a[..., 2:] / 2.0
    cb = b[..., :2] + b[..., 2:] / 2.0
    return np.linalg.norm(ca - cb, axis=-1)


@dataclass
class SequenceRecord:
    """A sequence on disk in the OTB layout."""

    name: str
    frame_paths: list
    boxes: np.ndarray

    def __post_init__(self):
        if len(self.frame_paths) != len(self.boxes):
            raise ValueError(f"{self.name}: {len(self.frame_paths)} frames but "
                             f"{len(self.boxes)} boxes")
        if len(self.boxes) and (np.asarray(self.boxes)[:, 2:] <= 0).any():
            raise ValueError(f"{self.name}: non-positive box area")

    def load(self):
        return Sequence(self.name, [load_frame(p) for p in self.frame_paths], self.boxes)


def read_boxes(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.replace("\t", ",").replace(" ", ",").split(",")
            rows.append([float(p) for p in parts if p])
    boxes = np.array(rows, dtype=np.float64).reshape(-1, 4)
    boxes[:, :2] -= 1.0  # OTB corners are 1-indexed
    return boxes


def load_record(directory):
    name = os.path.basename(os.path.normpath(directory))
    frames = sorted(glob.glob(os.path.join(directory, "img", "*.png"))
                    + glob.glob(os.path.join(directory, "img", "*.jpg")))
    return SequenceRecord(name, frames, read_boxes(os.path.join(directory, "groundtruth_rect.txt")))


def load_dataset(root):
    """Every sub-directory holding a groundtruth_rect.txt, sorted by name."""
    records, skipped = [], []
    for d in sorted(os.listdir(root)):
        path = os.path.join(root, d)
        if not os.path.isfile(os.path.join(path, "groundtruth_rect.txt")):
            continue
        try:
            records.append(load_record(path))
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", d, exc)
            skipped.append((d, str(exc)))
    return records, skipped


@dataclass
class SequenceResult:
    name: str
    boxes: np.ndarray
    confidences: np.ndarray
    ious: np.ndarray
    seconds: float
    drift: np.ndarray = None
    theta1_norm: float = 1.0
    center_error: float = 0.0

    @property
    def mean_drift(self):
        return float(np.mean(self.drift)) if self.drift is not None else 0.0

    @property
    def auc(self):
        return success_auc(self.ious)[1]

    @property
    def fps(self):
        n = max(len(self.ious) - 1, 1)
        return n / self.seconds if self.seconds > 0 else float("inf")


@dataclass
class EvalReport:
    results: list
    skipped: list = field(default_factory=list)
    label: str = ""

    @property
    def curve(self):
        if not self.results:
            return np.zeros(len(THRESHOLDS))
        return np.mean([success_auc(r.ious)[0] for r in self.results], axis=0)

    @property
    def auc(self):
        return float(self.curve.mean())

    @property
    def mean_center_error(self):
        return float(np.mean([r.center_error for r in self.results])) if self.results else 0.0

    @property
    def mean_drift(self):
        return float(np.mean([r.mean_drift for r in self.results])) if self.results else 0.0

    @property
    def mean_relative_drift(self):
        if not self.results:
            return 0.0
        return float(np.mean([r.mean_drift / max(r.theta1_norm, 1e-12) for r in self.results]))

    @property
    def fps(self):
        frames = sum(max(len(r.ious) - 1, 0) for r in self.results)
        secs = sum(r.seconds for r in self.results)
        return frames / secs if secs > 0 else 0.0


def evaluate_sequence(spec, seq):
    """``spec`` is a TrackerSpec or any picklable object with ``run(seq) -> RunResult``."""
    t0 = time.perf_counter()
    if hasattr(spec, "run"):
        run = spec.run(seq)
    else:
        run = run_sequence(spec, seq.frames, seq.boxes[0])
    dt = time.perf_counter() - t0
    return SequenceResult(seq.name, run.boxes, run.confidences, iou(run.boxes, seq.boxes), dt,
                          run.drift, run.theta1_norm,
                          float(center_error(run.boxes, seq.boxes).mean()))


def _eval_job(args):
    spec, item = args
    seq = item.load() if isinstance(item, SequenceRecord) else item
    return evaluate_sequence(spec, seq)


def run_ope(spec, dataset, threads=1, label=""):
    """One-pass evaluation: init on frame-1 groundtruth, never reset."""
    items = sorted(dataset, key=lambda s: s.name)
    jobs = [(spec, it) for it in items]
    results, skipped = [], []
    if threads > 1:
        from multiprocessing import get_context
        with get_context("spawn").Pool(threads) as pool:
            outs = pool.map(_safe_job, jobs)
    else:
        outs = [_safe_job(j) for j in jobs]
    for item, out in zip(items, outs):
        if isinstance(out, SequenceResult):
            results.append(out)
        else:
            log.warning("skipping %s: %s", item.name, out)
            skipped.append((item.name, out))
    return EvalReport(results, skipped, label)


def _safe_job(job):
    try:
        return _eval_job(job)
    except (OSError, ValueError) as exc:
        return str(exc)


def _fmt(v):
    return f"{v:.6f}"


def report_rows(report):
    rows = [["sequence", "frames", "auc", "mean_iou", "center_error", "model_drift"]]
    for r in report.results:
        rows.append([r.name, str(len(r.ious)), _fmt(r.auc), _fmt(float(np.mean(r.ious))),
                     _fmt(r.center_error), _fmt(r.mean_drift)])
    rows.append(["ALL", str(sum(len(r.ious) for r in report.results)), _fmt(report.auc),
                 _fmt(float(np.mean([np.mean(r.ious) for r in report.results]))
                      if report.results else 0.0),
                 _fmt(report.mean_center_error), _fmt(report.mean_drift)])
    for name, why in report.skipped:
        rows.append([f"SKIPPED:{name}", "0", "", "", why, ""])
    return rows


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def read_csv(path):
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh)]


def curve_rows(report):
    rows = [["threshold", "success"]]
    for t, s in zip(THRESHOLDS, report.curve):
        rows.append([f"{t:.2f}", _fmt(float(s))])
    return rows


def frame_rows(boxes, confidences):
    rows = [["frame", "x", "y", "w", "h", "confidence"]]
    for i, (b, c) in enumerate(zip(boxes, confidences)):
        rows.append([str(i + 1)] + [_fmt(float(v)) for v in b]
                    + ["" if np.isnan(c) else _fmt(float(c))])
    return rows


def rows_to_text(rows):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()
