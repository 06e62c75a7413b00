"""Detection scoring against ground truth: matching, accuracy/precision/recall, AP and mAP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .decode import BBox, iou
from .pipeline import read_records

DEFAULT_MATCH_IOU = 0.6
ACCURACY_MODES = ("box", "frame")


@dataclass(frozen=True)
class GroundTruth:
    frame_id: int
    class_id: int
    box: BBox
    video: Optional[str] = None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class Match:
    detection: int
    ground_truth: Optional[int]
    iou: float

    @property
    def is_tp(self):
        return self.ground_truth is not None


@dataclass
class MatchResult:
    counts: ConfusionCounts
    matches: list  # one Match per detection, in the input order of the detections


def match_detections(dets, gts, iou_threshold=DEFAULT_MATCH_IOU) -> MatchResult:
    """Greedy one-to-one matching of one frame's detections to its ground truth.

    Detections are visited in descending confidence. Each takes the unmatched
    same-class ground truth it overlaps most, provided that IoU is strictly
    above ``iou_threshold``; otherwise it is a false positive. Ground truths
    left over are false negatives.
    """
    order = sorted(range(len(dets)), key=lambda i: dets[i].sort_key())
    taken = [False] * len(gts)
    matches = [None] * len(dets)
    tp = 0
    for i in order:
        det = dets[i]
        best, best_iou = None, 0.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou > iou_threshold:
            taken[best] = True
            tp += 1
            matches[i] = Match(i, best, best_iou)
        else:
            matches[i] = Match(i, None, best_iou)
    counts = ConfusionCounts(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp)
    return MatchResult(counts, matches)


@dataclass(frozen=True)
class Metrics:
    """Accuracy, precision and recall; ``None`` where the denominator is zero."""

    accuracy: Optional[float]
    precision: Optional[float]
    recall: Optional[float]


def _ratio(num, den):
    return num / den if den else None


def metrics(counts: ConfusionCounts) -> Metrics:
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    return Metrics(
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        precision=_ratio(tp, tp + fp),
        recall=_ratio(tp, tp + fn),
    )


def average_precision(scores, is_tp, n_ground_truth) -> Optional[float]:
    """All-point interpolated AP for one class.

    Detections are cut at every distinct confidence (tied scores enter
    together), and AP is the area under the precision envelope, where the
    precision at each recall is the best precision at that recall or higher.
    Returns ``None`` when the class has no ground truth.
    """
    if n_ground_truth <= 0:
        return None
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(is_tp, dtype=bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(flags[order])
    n = np.arange(1, s.size + 1)
    ends = np.append(s[1:] != s[:-1], True)  # last index of each tie group
    recall = tp[ends] / n_ground_truth
    precision = tp[ends] / n[ends]
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass
class VideoRow:
    video: str
    frame_count: int
    counts: ConfusionCounts
    metrics: Metrics
    frames_without_gt: int = 0


@dataclass
class EvalReport:
    rows: list
    class_ap: dict
    mean_ap: Optional[float]  # percent points
    iou_threshold: float
    accuracy_mode: str = "box"
    notices: list = field(default_factory=list)
    malformed_lines: int = 0
    total_lines: int = 0

    @property
    def total_counts(self):
        total = ConfusionCounts()
        for row in self.rows:
            total = total + row.counts
        return total

    def render(self, class_names=None) -> str:
        fmt = lambda v: "n/a" if v is None else f"{v:.3f}"
        lines = [
            f"Detection evaluation (IoU > {self.iou_threshold}, accuracy mode: {self.accuracy_mode})",
            "Video | Frames | Accuracy | Precision | Recall",
        ]
        for r in self.rows:
            m = r.metrics
            lines.append(
                f"Video {r.video} | {r.frame_count} | {fmt(m.accuracy)} | "
                f"{fmt(m.precision)} | {fmt(m.recall)}"
            )
        if not self.rows:
            lines.append("(no frames evaluated)")
        lines.append("")
        lines.append("Class | AP")
        for k in sorted(self.class_ap):
            name = class_names[k] if class_names and k < len(class_names) else str(k)
            lines.append(f"{name} | {fmt(self.class_ap[k])}")
        lines.append(
            "mAP: n/a" if self.mean_ap is None else f"mAP: {self.mean_ap:.2f}"
        )
        for note in self.notices:
            lines.append(f"note: {note}")
        return "\n".join(lines)

    def as_dict(self):
        return {
            "iou_threshold": self.iou_threshold,
            "accuracy_mode": self.accuracy_mode,
            "videos": [
                {
                    "video": r.video,
                    "frame_count": r.frame_count,
                    "tp": r.counts.tp, "fp": r.counts.fp, "fn": r.counts.fn, "tn": r.counts.tn,
                    "accuracy": r.metrics.accuracy,
                    "precision": r.metrics.precision,
                    "recall": r.metrics.recall,
                    "frames_without_gt": r.frames_without_gt,
                }
                for r in self.rows
            ],
            "class_ap": {str(k): v for k, v in sorted(self.class_ap.items())},
            "mAP": self.mean_ap,
            "notices": list(self.notices),
        }


def evaluate(videos, iou_threshold=DEFAULT_MATCH_IOU, accuracy_mode="box") -> EvalReport:
    """Score in-memory data.

    ``videos`` maps a video name to ``(detections_by_frame, gts_by_frame)``,
    both dicts keyed by frame id. Every frame in ``detections_by_frame`` is
    counted, including frames absent from the ground truth.
    """
    if accuracy_mode not in ACCURACY_MODES:
        raise ValueError(f"accuracy_mode must be one of {ACCURACY_MODES}")
    rows, notices = [], []
    per_class = {}  # class id -> (scores, flags)
    gt_per_class = {}
    for video, (dets_by_frame, gts_by_frame) in videos.items():
        counts = ConfusionCounts()
        missing = 0
        for fid in sorted(set(dets_by_frame) | set(gts_by_frame)):
            dets = list(dets_by_frame.get(fid, []))
            gts = list(gts_by_frame.get(fid, []))
            if fid in dets_by_frame and fid not in gts_by_frame:
                missing += 1
            result = match_detections(dets, gts, iou_threshold)
            counts = counts + result.counts
            if accuracy_mode == "frame" and not dets and not gts and fid in dets_by_frame:
                counts = counts + ConfusionCounts(tn=1)
            for m in result.matches:
                d = dets[m.detection]
                scores, flags = per_class.setdefault(d.class_id, ([], []))
                scores.append(d.confidence)
                flags.append(m.is_tp)
            for g in gts:
                gt_per_class[g.class_id] = gt_per_class.get(g.class_id, 0) + 1
        n_frames = len(dets_by_frame)
        rows.append(VideoRow(str(video), n_frames, counts, metrics(counts), missing))
        if missing:
            notices.append(f"video {video}: {missing} frame(s) without ground truth scored as all-FP")
        if n_frames == 0:
            notices.append(f"video {video}: zero frames")
    class_ap = {}
    for k in sorted(set(per_class) | set(gt_per_class)):
        scores, flags = per_class.get(k, ([], []))
        ap = average_precision(scores, flags, gt_per_class.get(k, 0))
        if ap is None:
            notices.append(f"class {k}: no ground truth, excluded from mAP")
            continue
        class_ap[k] = ap
    mean_ap = 100.0 * float(np.mean(list(class_ap.values()))) if class_ap else None
    if accuracy_mode == "frame":
        notices.append("accuracy counts frames with no ground truth and no detections as TN")
    return EvalReport(rows, class_ap, mean_ap, iou_threshold, accuracy_mode, notices)


def read_ground_truth(path):
    """Parse a ground-truth JSON-lines file into ``(list of GroundTruth, malformed count)``."""
    gts, bad = [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                video = obj.get("video")
                gts.append(GroundTruth(int(obj["frame_id"]), int(obj["class_id"]),
                                       BBox.corners(*obj["box"]),
                                       None if video is None else str(video)))
            except (ValueError, KeyError, TypeError, AttributeError):
                bad += 1
    return gts, bad


def _count_lines(path):
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip())


def report(record_paths, gt_path, iou_threshold=DEFAULT_MATCH_IOU, accuracy_mode="box") -> EvalReport:
    """Evaluate record files against a ground-truth file, one row per record file.

    A record file's video name is the ``video`` field of its header, falling
    back to the file's parent directory name. Ground truth rows are grouped
    by their ``video`` field; a single records file is paired with a single
    ground-truth group regardless of names.
    """
    gts, bad = read_ground_truth(gt_path)
    total_lines = _count_lines(gt_path)
    groups = {}
    for g in gts:
        groups.setdefault(g.video, []).append(g)

    videos = {}
    notices = []
    for path in record_paths:
        header, records, bad_rec = read_records(path)
        bad += bad_rec
        total_lines += _count_lines(path)
        name = (header or {}).get("video") or Path(path).resolve().parent.name
        if name in groups:
            group = groups[name]
        elif len(record_paths) == 1 and len(groups) == 1:
            group = next(iter(groups.values()))
        else:
            group = []
            notices.append(f"video {name}: no ground truth group found")
        errors = sum(1 for r in records if r.error)
        if errors:
            notices.append(f"video {name}: {errors} frame(s) failed detection, scored with no detections")
        dets_by_frame = {r.frame_id: r.detections for r in records}
        gts_by_frame = {}
        for g in group:
            gts_by_frame.setdefault(g.frame_id, []).append(g)
        videos[name] = (dets_by_frame, gts_by_frame)
    rep = evaluate(videos, iou_threshold, accuracy_mode)
    rep.notices = notices + rep.notices
    if bad:
        rep.notices.append(f"{bad} malformed line(s) skipped")
    rep.malformed_lines, rep.total_lines = bad, total_lines
    return rep
