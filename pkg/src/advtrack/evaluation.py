"""One-pass and anchor-based evaluation of tracker outputs.

Overlap thresholds use strict ``>``, distance thresholds use ``<=``.  The
expected-average-overlap figure produced here is a fixed-horizon
approximation (per-run mean overlap over the first ``horizon`` frames, zero
after a failure), not the interval-averaged toolkit curve.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from advtrack.grad import DimensionError
from advtrack.metrics import PerturbDiagnostics
from advtrack.trackers.base import BBox

SUCCESS_GRID = np.linspace(0.0, 1.0, 21)
PRECISION_GRID = np.arange(0.0, 51.0)
NORM_PRECISION_GRID = np.linspace(0.0, 0.5, 101)
FAILURE_THRESHOLD = 0.1
ANCHOR_SPACING = 50


class EmptyInputError(ValueError):
    pass


class UndefinedDropError(ZeroDivisionError):
    pass


class AnchorRangeError(IndexError):
    pass


# ---------------------------------------------------------------------------
# overlaps


def bbox_iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return min(1.0, float(inter / union)) if union > 0 else 0.0


def boxes_iou(boxes: np.ndarray, box) -> np.ndarray:
    """IoU of every ``x, y, w, h`` row in ``boxes`` with one box."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    b = box.as_array() if isinstance(box, BBox) else np.asarray(box, dtype=np.float64)
    ix = np.clip(np.minimum(boxes[:, 0] + boxes[:, 2], b[0] + b[2]) - np.maximum(boxes[:, 0], b[0]), 0, None)
    iy = np.clip(np.minimum(boxes[:, 1] + boxes[:, 3], b[1] + b[3]) - np.maximum(boxes[:, 1], b[1]), 0, None)
    inter = ix * iy
    union = boxes[:, 2] * boxes[:, 3] + b[2] * b[3] - inter
    return np.minimum(np.divide(inter, union, out=np.zeros_like(inter), where=union > 0), 1.0)


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask extents differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def center_error(a: BBox, b: BBox) -> float:
    (ax, ay), (bx, by) = a.center, b.center
    return float(np.hypot(ax - bx, ay - by))


# ---------------------------------------------------------------------------
# OPE curves


def _nonempty(values, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyInputError(f"{what} is empty")
    return arr


def success_curve(overlaps, thresholds=SUCCESS_GRID) -> np.ndarray:
    ov = _nonempty(overlaps, "overlap list")
    th = _nonempty(thresholds, "threshold list")
    return (ov[None, :] > th[:, None]).mean(axis=1)


def auc(curve) -> float:
    return float(np.mean(_nonempty(curve, "curve")))


def precision_curve(center_errors, thresholds=PRECISION_GRID) -> np.ndarray:
    err = _nonempty(center_errors, "center-error list")
    th = _nonempty(thresholds, "threshold list")
    return (err[None, :] <= th[:, None]).mean(axis=1)


def precision_at(center_errors, pixels: float = 20.0) -> float:
    return float(precision_curve(center_errors, [pixels])[0])


def normalized_errors(preds: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    """Centre offsets divided by the ground-truth extents, as an ``N x 2`` array."""
    out = np.empty((len(gts), 2))
    for i, (p, g) in enumerate(zip(preds, gts)):
        if g.w <= 0 or g.h <= 0:
            raise DimensionError(f"degenerate ground-truth box {g}")
        (px, py), (gx, gy) = p.center, g.center
        out[i] = ((px - gx) / g.w, (py - gy) / g.h)
    return out


def norm_precision_curve(norm_errors, thresholds=NORM_PRECISION_GRID) -> np.ndarray:
    e = np.asarray(norm_errors, dtype=np.float64).reshape(-1, 2)
    if e.shape[0] == 0:
        raise EmptyInputError("normalized error list is empty")
    return precision_curve(np.hypot(e[:, 0], e[:, 1]), thresholds)


def norm_precision(norm_errors, thresholds=NORM_PRECISION_GRID) -> float:
    """Mean of the precision curve over normalised centre distances in [0, 0.5]."""
    return auc(norm_precision_curve(norm_errors, thresholds))


def ao_sr(overlaps) -> tuple[float, float, float]:
    ov = _nonempty(overlaps, "overlap list")
    return float(ov.mean()), float(np.mean(ov > 0.5)), float(np.mean(ov > 0.75))


# ---------------------------------------------------------------------------
# records


@dataclass
class SequenceResult:
    name: str
    predictions: list[BBox]
    overlaps: list[float]
    masks: list[np.ndarray] | None = None
    diagnostics: list[PerturbDiagnostics] = field(default_factory=list)
    center_errors: list[float] = field(default_factory=list)
    norm_errors: np.ndarray | None = None


@dataclass
class AnchorRun:
    anchor_frame: int
    run_overlaps: list[float]
    length: int  # frames available after the anchor
    failed: bool = False
    failure_frame: int | None = None

    @property
    def successful_frames(self) -> int:
        return self.failure_frame if self.failed else len(self.run_overlaps)


@dataclass
class MetricBundle:
    eao: float | None = None
    accuracy: float | None = None
    robustness: float | None = None
    auc: float | None = None
    precision_at_20: float | None = None
    norm_precision: float | None = None
    sr_050: float | None = None
    sr_075: float | None = None
    ao: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# protocols

# A runner drives one tracker (optionally under attack) through frames:
#   state = runner.init(frame, bbox, frame_index)
#   out, diag = runner.step(state, frame, frame_index)
# where ``out`` is a TrackerOutput and ``diag`` a PerturbDiagnostics or None.


class CleanRunner:
    def __init__(self, tracker):
        self.tracker = tracker

    def init(self, frame, bbox, frame_index=0):
        return self.tracker.init(frame, bbox)

    def step(self, state, frame, frame_index):
        return self.tracker.track(state, frame), None


def frame_overlap(out, gt_box: BBox, gt_mask, mode: str, frame_shape) -> float:
    if mode == "bbox":
        return bbox_iou(out.bbox, gt_box)
    if mode == "mask":
        if out.mask is None:
            raise ValueError("mask-mode evaluation needs a tracker that emits masks")
        mapping = out.aux.get("mapping")
        full = mapping.mask_to_frame(out.mask, frame_shape) if mapping is not None else out.mask
        return mask_iou(full, gt_mask)
    raise ValueError(f"unknown evaluation target {mode!r}")


def run_ope(runner, sequence, mode: str = "bbox", should_stop: Callable[[], bool] | None = None) -> SequenceResult:
    """Single initialisation on frame 0, then track every later frame.

    Frame 0 counts as a perfect prediction, as is conventional.
    """
    frames, gts, gms = sequence.frames, sequence.gt_boxes, sequence.gt_masks
    shape = frames[0].shape[:2]
    state = runner.init(frames[0], gts[0], 0)
    preds, overlaps, masks, diags = [gts[0]], [1.0], [gms[0]], []
    for t in range(1, len(frames)):
        if should_stop is not None and should_stop():
            raise TimeoutError(f"{sequence.name}: stopped at frame {t}")
        out, diag = runner.step(state, frames[t], t)
        preds.append(out.bbox)
        overlaps.append(frame_overlap(out, gts[t], gms[t], mode, shape))
        if out.mask is not None and out.aux.get("mapping") is not None:
            masks.append(out.aux["mapping"].mask_to_frame(out.mask, shape))
        if diag is not None:
            diags.append(diag)
    errs = [center_error(p, g) for p, g in zip(preds, gts)]
    return SequenceResult(sequence.name, preds, overlaps, masks if len(masks) == len(frames) else None,
                          diags, errs, normalized_errors(preds, gts))


def anchor_evaluate(runner_factory, sequence, anchors=None, mode: str = "bbox",
                    failure_threshold: float = FAILURE_THRESHOLD,
                    should_stop: Callable[[], bool] | None = None) -> list[AnchorRun]:
    """One run per anchor: initialise on the anchor's ground truth, track to failure or the end.

    ``runner_factory(run_index)`` returns a fresh runner for each run so that
    attack state never leaks across re-initialisations.
    """
    n = len(sequence.frames)
    anchors = list(sequence.anchors if anchors is None else anchors)
    if not anchors:
        raise EmptyInputError("no anchors")
    shape = sequence.frames[0].shape[:2]
    runs = []
    for k, a in enumerate(anchors):
        if a < 0 or a >= n - 1:
            raise AnchorRangeError(f"anchor {a} leaves no frames to track in a {n}-frame sequence")
        runner = runner_factory(k)
        state = runner.init(sequence.frames[a], sequence.gt_boxes[a], a)
        overlaps: list[float] = []
        run = AnchorRun(a, overlaps, n - 1 - a)
        for t in range(a + 1, n):
            if should_stop is not None and should_stop():
                raise TimeoutError(f"{sequence.name}: stopped at frame {t}")
            out, _ = runner.step(state, sequence.frames[t], t)
            ov = frame_overlap(out, sequence.gt_boxes[t], sequence.gt_masks[t], mode, shape)
            overlaps.append(ov)
            if ov < failure_threshold:
                run.failed = True
                run.failure_frame = len(overlaps) - 1
                break
        runs.append(run)
    return runs


def anchor_metrics(runs: Sequence[AnchorRun], horizon: int) -> tuple[float, float, float]:
    """``(eao, accuracy, robustness)`` from anchor runs.

    Robustness averages the successful fraction of each run; accuracy averages
    overlaps of successful frames over all runs (0 when there are none); the
    expected-overlap approximation averages, per run, the overlaps of the
    first ``horizon`` frames with everything from the failure on counted as 0.
    """
    if not runs:
        raise EmptyInputError("no anchor runs")
    if horizon < 1:
        raise ValueError("horizon must be positive")
    rob, eao, succ = [], [], []
    for r in runs:
        if r.length <= 0:
            raise EmptyInputError(f"zero-length run at anchor {r.anchor_frame}")
        ok = r.successful_frames
        rob.append(ok / r.length)
        succ.extend(r.run_overlaps[:ok])
        span = horizon if r.failed else min(horizon, r.length)
        eao.append(float(np.sum(r.run_overlaps[:min(ok, span)])) / span)
    accuracy = float(np.mean(succ)) if succ else 0.0
    return float(np.mean(eao)), accuracy, float(np.mean(rob))


def drop_percentage(original: float, attacked: float) -> float:
    if original == 0:
        raise UndefinedDropError("drop percentage undefined for an original value of 0")
    return 100.0 * (original - attacked) / original


def ope_bundle(results: Sequence[SequenceResult]) -> MetricBundle:
    """Pool frames of all sequences into one set of OPE figures."""
    if not results:
        raise EmptyInputError("no sequence results")
    overlaps = np.concatenate([r.overlaps for r in results])
    errs = np.concatenate([r.center_errors for r in results])
    norm = np.concatenate([r.norm_errors for r in results])
    ao, sr50, sr75 = ao_sr(overlaps)
    return MetricBundle(auc=auc(success_curve(overlaps)), precision_at_20=precision_at(errs),
                        norm_precision=norm_precision(norm), ao=ao, sr_050=sr50, sr_075=sr75)
