"""Detection-head decoding, box geometry and non-maximal suppression."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._validation import check_probability
from .exceptions import ShapeError

DEFAULT_SCORE_THRESHOLD = 0.6
DEFAULT_NMS_THRESHOLD = 0.6


class BoxFormat(enum.Enum):
    CENTER_NORM = "center_norm"  # (cx, cy, w, h) as fractions of the image
    TOPLEFT_PX = "topleft_px"  # (x, y, w, h) in pixels
    CORNER_PX = "corner_px"  # (xmin, ymin, xmax, ymax) in pixels


@dataclass(frozen=True)
class BBox:
    format: BoxFormat
    coords: tuple

    def __post_init__(self):
        if not isinstance(self.format, BoxFormat):
            try:
                object.__setattr__(self, "format", BoxFormat(self.format))
            except ValueError:
                raise ValueError(f"unknown box format {self.format!r}") from None
        coords = tuple(float(v) for v in self.coords)
        if len(coords) != 4:
            raise ValueError(f"a box has 4 coordinates, got {len(coords)}")
        if self.format is BoxFormat.CORNER_PX:
            if coords[0] > coords[2] or coords[1] > coords[3]:
                raise ValueError(f"corner box has min > max: {coords}")
        elif coords[2] < 0 or coords[3] < 0:
            raise ValueError(f"box has negative extent: {coords}")
        object.__setattr__(self, "coords", coords)

    @classmethod
    def corners(cls, xmin, ymin, xmax, ymax):
        return cls(BoxFormat.CORNER_PX, (xmin, ymin, xmax, ymax))

    def __iter__(self):
        return iter(self.coords)


@dataclass(frozen=True)
class Anchor:
    pw: float
    ph: float

    def __post_init__(self):
        if not (self.pw > 0 and self.ph > 0):
            raise ValueError(f"anchor extents must be positive, got {self.pw}x{self.ph}")


@dataclass(frozen=True)
class RawPrediction:
    tx: float
    ty: float
    tw: float
    th: float
    objectness_logit: float
    class_logits: tuple
    cell: tuple
    anchor: Anchor
    stride: float


@dataclass(frozen=True)
class Detection:
    box: BBox
    class_id: int
    confidence: float
    class_name: str = ""
    frame_id: Optional[int] = None

    def sort_key(self):
        """Confidence descending, then class id, then smaller xmin, then smaller ymin."""
        xmin, ymin = self.box.coords[:2]
        return (-self.confidence, self.class_id, xmin, ymin)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


@dataclass
class HeadDecoding:
    """Decoded predictions of one or more heads, one row per (anchor, cell).

    Boxes are ``(cx, cy, w, h)`` in network-input pixels.
    """

    boxes: np.ndarray
    objectness: np.ndarray
    class_scores: np.ndarray
    dropped: int = 0
    raw: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self):
        return len(self.boxes)

    def corner_boxes(self):
        cx, cy, w, h = self.boxes.T
        return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)

    @classmethod
    def concat(cls, parts: Sequence["HeadDecoding"], n_classes=None):
        if not parts:
            c = n_classes or 0
            return cls(np.zeros((0, 4)), np.zeros(0), np.zeros((0, c)))
        return cls(
            np.concatenate([p.boxes for p in parts]),
            np.concatenate([p.objectness for p in parts]),
            np.concatenate([p.class_scores for p in parts]),
            sum(p.dropped for p in parts),
        )


def decode_head(output, anchors=None, n_classes=None, stride=None) -> HeadDecoding:
    """Apply the YOLO output transforms to one head tensor ``(B*(5+C), S, S)``.

    ``output`` may be a :class:`~darkyolo.engine.ForwardOutput` (anchors,
    class count and stride are then taken from its scale) or a bare array
    with those three supplied. Centers are ``(sigmoid(t) + cell) * stride``,
    sizes ``anchor * exp(t)``, and each class score is objectness times an
    independent per-class sigmoid. Predictions with non-finite raw or decoded
    values are dropped and counted in ``dropped``.
    """
    if hasattr(output, "scale"):
        scale = output.scale
        anchors = scale.anchors if anchors is None else anchors
        n_classes = scale.n_classes if n_classes is None else n_classes
        stride = scale.stride if stride is None else stride
        output = output.tensor
    t = np.asarray(output, dtype=np.float64)
    anchors = [a if isinstance(a, Anchor) else Anchor(*a) for a in anchors]
    b = len(anchors)
    attrs = 5 + n_classes
    if t.ndim != 3 or t.shape[0] != b * attrs:
        raise ShapeError(
            f"head tensor shape {t.shape} does not hold {b} boxes x (5 + {n_classes}) channels"
        )
    sy, sx = t.shape[1:]
    # (B, attrs, S, S) -> (B*S*S, attrs), rows ordered anchor, row, column
    raw = t.reshape(b, attrs, sy, sx).transpose(0, 2, 3, 1).reshape(-1, attrs)
    cy, cx = np.meshgrid(np.arange(sy), np.arange(sx), indexing="ij")
    cx = np.tile(cx.ravel(), b)
    cy = np.tile(cy.ravel(), b)
    pw = np.repeat([a.pw for a in anchors], sy * sx)
    ph = np.repeat([a.ph for a in anchors], sy * sx)

    with np.errstate(over="ignore", invalid="ignore"):
        bx = (sigmoid(raw[:, 0]) + cx) * stride
        by = (sigmoid(raw[:, 1]) + cy) * stride
        bw = pw * np.exp(raw[:, 2])
        bh = ph * np.exp(raw[:, 3])
        obj = sigmoid(raw[:, 4])
        cls = obj[:, None] * sigmoid(raw[:, 5:])
    boxes = np.stack([bx, by, bw, bh], axis=1)
    ok = (
        np.isfinite(raw).all(axis=1)
        & np.isfinite(boxes).all(axis=1)
        & np.isfinite(cls).all(axis=1)
    )
    return HeadDecoding(
        boxes=boxes[ok],
        objectness=obj[ok],
        class_scores=cls[ok],
        dropped=int((~ok).sum()),
        raw=raw[ok],
    )


def confidence_filter(candidates: HeadDecoding, threshold=DEFAULT_SCORE_THRESHOLD,
                      class_names=None, frame_id=None) -> list:
    """Keep candidates whose best class score is strictly above ``threshold``.

    Each survivor becomes one :class:`Detection` labelled with its argmax
    class and carrying a corner-format box in network-input pixels.
    """
    threshold = check_probability(threshold, "score threshold")
    if len(candidates) == 0:
        return []
    best = candidates.class_scores.argmax(axis=1)
    score = candidates.class_scores[np.arange(len(best)), best]
    corners = candidates.corner_boxes()
    dets = []
    for i in np.flatnonzero(score > threshold):
        k = int(best[i])
        name = class_names[k] if class_names is not None and k < len(class_names) else ""
        dets.append(
            Detection(BBox.corners(*corners[i]), k, float(score[i]), name, frame_id)
        )
    return dets


def _as_corners(box, image_size=None):
    if isinstance(box, BBox):
        if box.format is BoxFormat.CORNER_PX:
            return box.coords
        return convert_box(box, BoxFormat.CORNER_PX, image_size).coords
    return tuple(float(v) for v in box)


def iou(a, b, image_size=None) -> float:
    """Intersection area over union area of two boxes.

    Plain 4-tuples are read as corner coordinates. Two zero-area boxes have
    IoU 1 when identical and 0 otherwise.
    """
    ax0, ay0, ax1, ay1 = _as_corners(a, image_size)
    bx0, by0, bx1, by1 = _as_corners(b, image_size)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0:
        return 1.0 if (ax0, ay0, ax1, ay1) == (bx0, by0, bx1, by1) else 0.0
    return min(1.0, max(0.0, inter / union))


def nms(detections: Sequence[Detection], iou_threshold=DEFAULT_NMS_THRESHOLD) -> list:
    """Greedy per-class suppression.

    Within each class the highest-confidence box is kept and every remaining
    box overlapping it with IoU strictly above ``iou_threshold`` is dropped.
    Boxes of different classes never suppress each other.
    """
    iou_threshold = check_probability(iou_threshold, "NMS IoU threshold")
    by_class = {}
    for det in sorted(detections, key=Detection.sort_key):
        by_class.setdefault(det.class_id, []).append(det)
    kept = []
    for group in by_class.values():
        survivors = []
        for det in group:
            if all(iou(det.box, k.box) <= iou_threshold for k in survivors):
                survivors.append(det)
        kept.extend(survivors)
    kept.sort(key=Detection.sort_key)
    return kept


def convert_box(box: BBox, target, image_size=None, compat_256=False) -> BBox:
    """Exact conversion between the three box formats.

    ``image_size`` is ``(W, H)`` and is needed whenever CENTER_NORM is on one
    side. With ``compat_256`` normalised coordinates are scaled by 256 on both
    axes regardless of the image.
    """
    target = BoxFormat(target) if not isinstance(target, BoxFormat) else target
    if box.format is target:
        return box
    if BoxFormat.CENTER_NORM in (box.format, target):
        if compat_256:
            sw = sh = 256.0
        elif image_size is None:
            raise ValueError("image_size is required to convert normalised boxes")
        else:
            sw, sh = (float(v) for v in image_size)

    # to top-left pixels
    if box.format is BoxFormat.CENTER_NORM:
        cx, cy, w, h = box.coords
        x, y, w, h = (cx - w / 2) * sw, (cy - h / 2) * sh, w * sw, h * sh
    elif box.format is BoxFormat.CORNER_PX:
        x0, y0, x1, y1 = box.coords
        x, y, w, h = x0, y0, x1 - x0, y1 - y0
    else:
        x, y, w, h = box.coords

    if target is BoxFormat.TOPLEFT_PX:
        return BBox(target, (x, y, w, h))
    if target is BoxFormat.CORNER_PX:
        return BBox(target, (x, y, x + w, y + h))
    return BBox(target, ((x + w / 2) / sw, (y + h / 2) / sh, w / sw, h / sh))


def load_names(path) -> list:
    """Class labels, one per line; line index is the class id."""
    with open(path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh.read().splitlines()]
    while names and not names[-1]:
        names.pop()
    return names


def default_names_path():
    from importlib.resources import files

    return files("darkyolo") / "data" / "coco.names"
