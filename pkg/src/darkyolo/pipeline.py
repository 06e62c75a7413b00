"""Frame ingestion, preprocessing and sequence-level detection runs.

A run reads a directory of still frames (extract them from a video first,
e.g. ``ffmpeg -i clip.mp4 frames/f%05d.png``), pushes each frame through
preprocess -> forward -> decode -> score filter -> NMS -> box conversion,
and persists one JSON line per frame.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image, ImageDraw

from ._validation import check_image, check_input_size, check_probability
from .decode import (
    DEFAULT_NMS_THRESHOLD,
    DEFAULT_SCORE_THRESHOLD,
    BBox,
    BoxFormat,
    Detection,
    HeadDecoding,
    confidence_filter,
    convert_box,
    decode_head,
    nms,
)
from .engine import activation_cache_plan, forward

log = logging.getLogger(__name__)

PREPROCESS_MODES = ("stretch", "letterbox")
LETTERBOX_FILL = 0.5
RECORDS_FORMAT = "darkyolo-records/1"
LOSSLESS_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".pbm", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class RunConfig:
    netdef: Optional[str] = None
    weights: Optional[str] = None
    names: Optional[str] = None
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_threshold: float = DEFAULT_NMS_THRESHOLD
    input_size: int = 416
    mode: str = "stretch"
    out_dir: Optional[str] = None
    workers: int = 1
    compat_256_scale: bool = False

    def __post_init__(self):
        check_probability(self.score_threshold, "score_threshold")
        check_probability(self.nms_threshold, "nms_threshold")
        check_input_size(self.input_size)
        if self.mode not in PREPROCESS_MODES:
            raise ValueError(f"mode must be one of {PREPROCESS_MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def as_dict(self):
        d = asdict(self)
        for key in ("netdef", "weights", "names", "out_dir"):
            if d[key] is not None:
                d[key] = str(d[key])
        return d


@dataclass(frozen=True)
class Frame:
    frame_id: int
    source: str
    image: np.ndarray  # HxWx3 uint8 RGB

    @property
    def original_size(self):
        return (self.image.shape[1], self.image.shape[0])

    @property
    def pixels(self):
        """The frame as a ``(3, H, W)`` float32 tensor in [0, 1]."""
        return np.ascontiguousarray(self.image.transpose(2, 0, 1), dtype=np.float32) / 255.0


@dataclass
class FrameRecord:
    frame_id: int
    source: str
    detections: list = field(default_factory=list)
    latency_ms: float = 0.0
    input_hash: str = ""
    error: Optional[str] = None

    def to_json(self) -> str:
        """Persisted line; latency goes to the timing sidecar so records stay reproducible."""
        obj = {
            "frame_id": self.frame_id,
            "source": self.source,
            "input_hash": self.input_hash,
            "detections": [
                {
                    "class_id": d.class_id,
                    "class_name": d.class_name,
                    "confidence": d.confidence,
                    "box": list(d.box.coords),
                }
                for d in self.detections
            ],
        }
        if self.error is not None:
            obj["error"] = self.error
        return json.dumps(obj)


class FrameReader:
    """Iterates decodable images of a directory in lexicographic filename order.

    Files that cannot be decoded are skipped with a warning and listed in
    ``skipped``; frame ids stay consecutive over the decoded frames.
    """

    def __init__(self, source):
        self.source = Path(source)
        self.skipped = []

    def paths(self):
        if self.source.is_file():
            return [self.source]
        return sorted(
            p for p in self.source.iterdir() if p.is_file() and not p.name.startswith(".")
        )

    def __iter__(self):
        self.skipped = []
        frame_id = 0
        for path in self.paths():
            try:
                with Image.open(path) as img:
                    img.load()
                    rgb = np.asarray(img.convert("RGB"))
            except Exception as exc:  # PIL raises a zoo of types for bad files
                log.warning("skipping undecodable frame %s: %s", path, exc)
                self.skipped.append(str(path))
                continue
            yield Frame(frame_id, path.name, check_image(rgb))
            frame_id += 1


def ingest_frames(source) -> FrameReader:
    return FrameReader(source)


@dataclass(frozen=True)
class ScaleInfo:
    """Mapping from network-input pixels back to the original image."""

    original_size: tuple
    target_size: tuple
    scale_x: float
    scale_y: float
    pad_x: int = 0
    pad_y: int = 0
    mode: str = "stretch"

    def to_original(self, corners):
        x0, y0, x1, y1 = corners
        return (
            (x0 - self.pad_x) / self.scale_x,
            (y0 - self.pad_y) / self.scale_y,
            (x1 - self.pad_x) / self.scale_x,
            (y1 - self.pad_y) / self.scale_y,
        )

    def to_normalized(self, corners) -> BBox:
        """Network-pixel corners as a CENTER_NORM box relative to the original image."""
        x0, y0, x1, y1 = self.to_original(corners)
        w, h = self.original_size
        return BBox(
            BoxFormat.CENTER_NORM,
            ((x0 + x1) / 2 / w, (y0 + y1) / 2 / h, max(x1 - x0, 0) / w, max(y1 - y0, 0) / h),
        )


def resize_bilinear(chw, out_h, out_w):
    """Bilinear resize of a ``(c, h, w)`` float array with half-pixel centres."""
    c, h, w = chw.shape
    if (h, w) == (out_h, out_w):
        return chw.astype(np.float32, copy=True)

    def axis(n_in, n_out):
        pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (pos - lo).astype(np.float32)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    rows = chw[:, y0, :] * (1 - fy)[None, :, None] + chw[:, y1, :] * fy[None, :, None]
    out = rows[:, :, x0] * (1 - fx)[None, None, :] + rows[:, :, x1] * fx[None, None, :]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def preprocess(frame, target=(416, 416), mode="stretch"):
    """Resize a frame (or raw image) to the network input.

    Returns the ``(3, th, tw)`` tensor and the :class:`ScaleInfo` that maps
    network coordinates back onto the original image.
    """
    image = frame.image if isinstance(frame, Frame) else check_image(frame)
    if isinstance(target, int):
        target = (target, target)
    th, tw = target
    if th % 32 or tw % 32:
        raise ValueError(f"target {target} must be divisible by 32")
    h, w = image.shape[:2]
    chw = image.transpose(2, 0, 1).astype(np.float32) / 255.0
    if mode == "stretch":
        return resize_bilinear(chw, th, tw), ScaleInfo((w, h), (tw, th), tw / w, th / h)
    if mode != "letterbox":
        raise ValueError(f"unknown preprocess mode {mode!r}")
    # integer arithmetic as in Darknet's letterbox_image
    if tw * h > th * w:
        new_h, new_w = th, (w * th) // h
    else:
        new_w, new_h = tw, (h * tw) // w
    new_w, new_h = max(new_w, 1), max(new_h, 1)
    pad_x, pad_y = (tw - new_w) // 2, (th - new_h) // 2
    out = np.full((3, th, tw), LETTERBOX_FILL, dtype=np.float32)
    out[:, pad_y : pad_y + new_h, pad_x : pad_x + new_w] = resize_bilinear(chw, new_h, new_w)
    return out, ScaleInfo((w, h), (tw, th), new_w / w, new_h / h, pad_x, pad_y, "letterbox")


def detect_image(graph, image, config: RunConfig, class_names=None, plan=None, frame_id=None):
    """Detections for one image in original-image CORNER_PX coordinates."""
    frame = image if isinstance(image, Frame) else Frame(frame_id or 0, "", check_image(image))
    size = config.input_size
    x, info = preprocess(frame, (size, size), config.mode)
    heads = forward(graph, x, plan=plan)
    decoded = HeadDecoding.concat([decode_head(h) for h in heads], graph.class_count)
    if decoded.dropped:
        log.warning("frame %s: dropped %d non-finite predictions", frame.frame_id, decoded.dropped)
    dets = confidence_filter(decoded, config.score_threshold, class_names, frame.frame_id)
    dets = nms(dets, config.nms_threshold)

    if config.compat_256_scale:
        bound_w = bound_h = 256.0
    else:
        bound_w, bound_h = frame.original_size
    out = []
    for d in dets:
        norm = info.to_normalized(d.box.coords)
        box = convert_box(norm, BoxFormat.CORNER_PX, frame.original_size, config.compat_256_scale)
        x0, y0, x1, y1 = box.coords
        x0, x1 = min(max(x0, 0.0), bound_w), min(max(x1, 0.0), bound_w)
        y0, y1 = min(max(y0, 0.0), bound_h), min(max(y1, 0.0), bound_h)
        out.append(Detection(BBox.corners(x0, y0, x1, y1), d.class_id, d.confidence,
                             d.class_name, frame.frame_id))
    out.sort(key=Detection.sort_key)
    return out


def frame_digest(frame: Frame) -> str:
    h = hashlib.sha256()
    h.update(repr(frame.image.shape).encode())
    h.update(frame.image.tobytes())
    return h.hexdigest()


def class_color(class_id):
    digest = hashlib.sha256(str(class_id).encode()).digest()
    return tuple(64 + b % 192 for b in digest[:3])


def annotate(frame: Frame, detections) -> Image.Image:
    img = Image.fromarray(frame.image.copy(), "RGB")
    draw = ImageDraw.Draw(img)
    for d in detections:
        color = class_color(d.class_id)
        x0, y0, x1, y1 = d.box.coords
        draw.rectangle([x0, y0, x1, y1], outline=color, width=2)
        label = f"{d.class_name or d.class_id} {d.confidence:.2f}"
        draw.text((x0 + 2, max(y0 - 11, 0)), label, fill=color)
    return img


def annotated_name(source):
    p = Path(source)
    return p.name if p.suffix.lower() in LOSSLESS_SUFFIXES else p.stem + ".png"


def file_digest(path):
    if path is None:
        return None
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def run_sequence(graph, frames, config: RunConfig, class_names=None, video=None,
                 weights_digest=None):
    """Detect on every frame and persist records, timings and annotated images.

    Output files land in ``config.out_dir`` when set: ``records.jsonl``
    (header line + one line per frame), ``timing.jsonl`` (per-frame latency)
    and ``annotated/``. A frame that fails is recorded with an ``error`` and
    the run continues. Records are written in frame-id order whatever the
    worker count.
    """
    plan = activation_cache_plan(graph)

    def work(frame):
        record = FrameRecord(frame.frame_id, frame.source, input_hash=frame_digest(frame))
        start = time.perf_counter()
        try:
            record.detections = detect_image(graph, frame, config, class_names, plan)
        except Exception as exc:
            log.error("frame %d (%s) failed: %s", frame.frame_id, frame.source, exc)
            record.error = f"{type(exc).__name__}: {exc}"
        record.latency_ms = (time.perf_counter() - start) * 1000.0
        return frame, record

    frames = list(frames)
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            results = list(pool.map(work, frames))
    else:
        results = [work(f) for f in frames]
    results.sort(key=lambda fr: fr[1].frame_id)
    records = [r for _, r in results]

    if config.out_dir is not None:
        out = Path(config.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        header = {
            "type": "header",
            "format": RECORDS_FORMAT,
            "video": video,
            "config": config.as_dict(),
            "weights_digest": weights_digest,
        }
        with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header) + "\n")
            for r in records:
                fh.write(r.to_json() + "\n")
        with open(out / "timing.jsonl", "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps({"frame_id": r.frame_id, "latency_ms": r.latency_ms}) + "\n")
        ann_dir = out / "annotated"
        ann_dir.mkdir(exist_ok=True)
        for frame, record in results:
            annotate(frame, record.detections).save(ann_dir / annotated_name(frame.source))
    return records


def latency_summary(records):
    lat = np.array([r.latency_ms for r in records], dtype=np.float64)
    if lat.size == 0:
        return {"frames": 0, "mean_ms": None, "median_ms": None, "max_ms": None, "fps": None}
    mean = float(lat.mean())
    return {
        "frames": int(lat.size),
        "mean_ms": mean,
        "median_ms": float(np.median(lat)),
        "max_ms": float(lat.max()),
        "fps": 1000.0 / mean if mean > 0 else None,
    }


def read_records(path):
    """Parse a records file into ``(header, records, malformed_line_count)``."""
    header, records, bad = None, [], 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if obj.get("type") == "header":
                    header = obj
                    continue
                dets = [
                    Detection(BBox.corners(*d["box"]), int(d["class_id"]),
                              float(d["confidence"]), d.get("class_name", ""),
                              int(obj["frame_id"]))
                    for d in obj.get("detections", [])
                ]
                records.append(FrameRecord(int(obj["frame_id"]), obj.get("source", ""),
                                           dets, input_hash=obj.get("input_hash", ""),
                                           error=obj.get("error")))
            except (ValueError, KeyError, TypeError, AttributeError):
                bad += 1
    return header, records, bad


def default_video_name(source) -> str:
    p = Path(source)
    return p.stem if p.is_file() else os.path.basename(os.path.normpath(str(p)))
