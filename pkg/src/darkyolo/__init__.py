"""CPU YOLOv3 inference on Darknet model files, with detection scoring tools."""

from .decode import BBox, BoxFormat, Detection, convert_box, iou, nms
from .engine import activation_cache_plan, forward
from .estimator import FramePreprocessor, YoloDetector
from .evalkit import average_precision, match_detections, metrics
from .netdef import kernel_size, load_netdef, load_weights, parse_netdef

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "BoxFormat",
    "Detection",
    "FramePreprocessor",
    "YoloDetector",
    "activation_cache_plan",
    "average_precision",
    "convert_box",
    "forward",
    "iou",
    "kernel_size",
    "load_netdef",
    "load_weights",
    "match_detections",
    "metrics",
    "nms",
    "parse_netdef",
]
