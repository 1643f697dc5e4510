"""Detection evaluation: IoU, confidence-ranked matching, PR curves, AP, mAP.

Conventions (the usual modern ones, spelled out because they matter):

* matching is per class and per image; a detection matches the unmatched
  ground-truth box of highest IoU when that IoU clears the threshold
  (inclusive >=), each ground truth matches at most once;
* score ties are broken by input index, equal-IoU candidates by ground-truth
  index, so evaluation is deterministic;
* AP uses all-point interpolation: the precision envelope (running maximum
  from the right) integrated exactly over recall increments;
* classes without any ground truth are excluded from the mAP mean.

Everything here is plain Python floats, so results are reproducible bit for
bit across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ParseError

__all__ = [
    "Box",
    "GroundTruthBox",
    "DetectionBox",
    "PrCurve",
    "MatchResult",
    "EvalReport",
    "iou",
    "match",
    "pr_curve",
    "average_precision",
    "mean_ap",
    "map_sweep",
    "evaluate",
    "sweep_thresholds",
    "parse_ground_truth",
    "parse_detections",
    "format_report",
    "format_table",
]

_CORNER_TOL = 1e-6


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized center/size coordinates."""

    xc: float
    yc: float
    w: float
    h: float

    def __post_init__(self):
        for name, v in (("xc", self.xc), ("yc", self.yc), ("w", self.w), ("h", self.h)):
            if not isinstance(v, (int, float)) or v != v:
                raise ValueError(f"box field {name} must be a finite number")
        if not (0.0 <= self.xc <= 1.0 and 0.0 <= self.yc <= 1.0):
            raise ValueError(f"box center ({self.xc}, {self.yc}) outside [0, 1]")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size ({self.w}, {self.h}) must be positive")
        for corner in self.corners():
            if corner < -_CORNER_TOL or corner > 1.0 + _CORNER_TOL:
                raise ValueError(f"box corner {corner} outside [0, 1] tolerance")

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1)"""
        return (
            self.xc - self.w / 2.0,
            self.yc - self.h / 2.0,
            self.xc + self.w / 2.0,
            self.yc + self.h / 2.0,
        )


@dataclass(frozen=True)
class GroundTruthBox:
    box: Box
    class_id: int
    image_id: str

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class DetectionBox:
    box: Box
    class_id: int
    image_id: str
    score: float

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")


def iou(a: Box, b: Box) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


@dataclass
class MatchResult:
    """Per-detection TP flags in descending-score order, plus the FN count.

    ``order[k]`` is the original index of the detection behind ``tp[k]``.
    """

    order: list[int]
    tp: list[bool]
    fn: int


def match(
    dets: Sequence[DetectionBox], gts: Sequence[GroundTruthBox], iou_thresh: float
) -> MatchResult:
    """Greedy single-match assignment for one class."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    tp = []
    for i in order:
        det = dets[i]
        best = 0.0
        best_j = -1
        for j, gt in enumerate(gts):
            if taken[j] or gt.image_id != det.image_id:
                continue
            overlap = iou(det.box, gt.box)
            if overlap > best:
                best = overlap
                best_j = j
        if best_j >= 0 and best >= iou_thresh:
            taken[best_j] = True
            tp.append(True)
        else:
            tp.append(False)
    return MatchResult(order=order, tp=tp, fn=taken.count(False))


@dataclass(frozen=True)
class PrCurve:
    """Cumulative (recall, precision) after each detection in score order."""

    points: tuple[tuple[float, float], ...]
    gt_count: int

    def __post_init__(self):
        last_recall = 0.0
        for recall, precision in self.points:
            if recall < last_recall:
                raise ValueError("recalls must be non-decreasing")
            if not (0.0 <= precision <= 1.0):
                raise ValueError(f"precision {precision} outside [0, 1]")
            last_recall = recall


def pr_curve(tp_flags: Sequence[bool], gt_count: int) -> PrCurve:
    """Build the curve from TP/FP flags in descending-score order.

    With zero ground truths every point has recall 0 (and AP is defined 0).
    """
    if gt_count < 0:
        raise ValueError("gt_count must be >= 0")
    points = []
    tp_cum = 0
    for k, flag in enumerate(tp_flags, start=1):
        if flag:
            tp_cum += 1
        recall = tp_cum / gt_count if gt_count > 0 else 0.0
        points.append((recall, tp_cum / k))
    return PrCurve(points=tuple(points), gt_count=gt_count)


def average_precision(curve: PrCurve) -> float:
    """All-point interpolated area under the PR curve."""
    if curve.gt_count == 0 or not curve.points:
        return 0.0
    n = len(curve.points)
    envelope = [0.0] * n
    best = 0.0
    for i in range(n - 1, -1, -1):
        best = max(best, curve.points[i][1])
        envelope[i] = best
    ap = 0.0
    prev_recall = 0.0
    for i in range(n):
        recall = curve.points[i][0]
        ap += (recall - prev_recall) * envelope[i]
        prev_recall = recall
    return ap


def mean_ap(aps: Sequence[float]) -> float:
    """Mean of per-class APs; the caller passes only classes that have GT."""
    if len(aps) == 0:
        raise ValueError("mean over zero classes is undefined")
    return sum(aps) / len(aps)


def sweep_thresholds() -> tuple[float, ...]:
    """IoU thresholds 0.50:0.05:0.95 as exact double literals."""
    return tuple((50 + 5 * i) / 100 for i in range(10))


@dataclass
class EvalReport:
    """Per-class AP at IoU 0.5, plus the two summary means."""

    ap50: dict[int, float] = field(default_factory=dict)
    map50: float = 0.0
    map5095: float = 0.0


def _ap_for_class(
    dets: Sequence[DetectionBox],
    gts: Sequence[GroundTruthBox],
    thresholds: Sequence[float],
) -> list[float]:
    out = []
    for t in thresholds:
        result = match(dets, gts, t)
        out.append(average_precision(pr_curve(result.tp, len(gts))))
    return out


def evaluate(
    dets: Sequence[DetectionBox],
    gts: Sequence[GroundTruthBox],
    num_classes: int | None = None,
    thresholds: Sequence[float] | None = None,
    threads: int = 1,
) -> EvalReport:
    """Full evaluation over all classes that have ground truth.

    Per-class work may run on a thread pool; the reduction happens in fixed
    class order either way, so the report is deterministic.
    """
    if thresholds is None:
        thresholds = sweep_thresholds()
    classes = sorted({gt.class_id for gt in gts})
    if num_classes is not None:
        for obj in list(gts) + list(dets):
            if obj.class_id >= num_classes:
                raise ValueError(
                    f"class_id {obj.class_id} outside configured range {num_classes}"
                )
    if not classes:
        raise ValueError("no class has any ground truth; mAP is undefined")

    by_class_dets = {c: [d for d in dets if d.class_id == c] for c in classes}
    by_class_gts = {c: [g for g in gts if g.class_id == c] for c in classes}
    tasks = [(by_class_dets[c], by_class_gts[c], thresholds) for c in classes]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda args: _ap_for_class(*args), tasks))
    else:
        rows = [_ap_for_class(*args) for args in tasks]

    report = EvalReport()
    for c, aps in zip(classes, rows):
        report.ap50[c] = aps[0]
    report.map50 = mean_ap([rows[i][0] for i in range(len(classes))])
    per_threshold = [
        mean_ap([rows[i][t] for i in range(len(classes))]) for t in range(len(thresholds))
    ]
    report.map5095 = sum(per_threshold) / len(per_threshold)
    return report


def map_sweep(
    dets: Sequence[DetectionBox],
    gts: Sequence[GroundTruthBox],
    thresholds: Sequence[float] | None = None,
) -> tuple[float, float]:
    """(mAP at IoU 0.5, mean mAP over the threshold sweep)."""
    report = evaluate(dets, gts, thresholds=thresholds)
    return report.map50, report.map5095


# ---------------------------------------------------------------------------
# text input/output
# ---------------------------------------------------------------------------


def _data_lines(text: str) -> Iterable[tuple[int, list[str]]]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        yield lineno, line.split()


def parse_ground_truth(text: str) -> list[GroundTruthBox]:
    """Parse `image_id class_id xc yc w h` lines; `#` starts a comment."""
    out = []
    for lineno, fields in _data_lines(text):
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields, got {len(fields)}", line=lineno)
        try:
            box = Box(*(float(v) for v in fields[2:6]))
            out.append(GroundTruthBox(box=box, class_id=int(fields[1]), image_id=fields[0]))
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return out


def parse_detections(text: str) -> list[DetectionBox]:
    """Parse `image_id class_id score xc yc w h` lines."""
    out = []
    for lineno, fields in _data_lines(text):
        if len(fields) != 7:
            raise ParseError(f"expected 7 fields, got {len(fields)}", line=lineno)
        try:
            box = Box(*(float(v) for v in fields[3:7]))
            out.append(
                DetectionBox(
                    box=box,
                    class_id=int(fields[1]),
                    image_id=fields[0],
                    score=float(fields[2]),
                )
            )
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
    return out


def format_report(report: EvalReport) -> str:
    """Machine-readable key/value lines."""
    lines = [f"class.{c}.ap50={report.ap50[c]:.6f}" for c in sorted(report.ap50)]
    lines.append(f"map50={report.map50:.6f}")
    lines.append(f"map5095={report.map5095:.6f}")
    return "\n".join(lines) + "\n"


def format_table(report: EvalReport, class_names: Sequence[str] | None = None) -> str:
    """Human-readable companion table."""
    rows = [("class", "ap50")]
    for c in sorted(report.ap50):
        name = class_names[c] if class_names and c < len(class_names) else str(c)
        rows.append((name, f"{report.ap50[c]:.3f}"))
    rows.append(("mAP@0.5", f"{report.map50:.3f}"))
    rows.append(("mAP@0.5:0.95", f"{report.map5095:.3f}"))
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows) + "\n"
