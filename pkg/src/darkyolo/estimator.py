"""scikit-learn style front ends for the detector and its preprocessing."""
from __future__ import annotations

from dataclasses import replace
from importlib.resources import files

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image, check_input_size, check_probability
from .decode import DEFAULT_NMS_THRESHOLD, DEFAULT_SCORE_THRESHOLD, load_names
from .engine import activation_cache_plan, fold_graph
from .netdef import load_netdef, load_weights
from .pipeline import PREPROCESS_MODES, Frame, RunConfig, detect_image, preprocess


def bundled_path(name):
    """Path of a file shipped in ``darkyolo/data`` (``yolov3.cfg``, ``coco.names``)."""
    return str(files("darkyolo") / "data" / name)


def _as_image_list(X):
    if isinstance(X, Frame):
        return [X]
    if isinstance(X, np.ndarray) and X.ndim in (2, 3):
        return [X]
    return list(X)


class FramePreprocessor(TransformerMixin, BaseEstimator):
    """Resize raw RGB images to the square network input.

    ``transform`` returns an ``(n, 3, size, size)`` float32 array in [0, 1];
    the per-image :class:`~darkyolo.pipeline.ScaleInfo` objects of the last
    call are kept in ``scale_info_``.
    """

    def __init__(self, input_size=416, mode="stretch"):
        self.input_size = input_size
        self.mode = mode

    def fit(self, X=None, y=None):
        check_input_size(self.input_size)
        if self.mode not in PREPROCESS_MODES:
            raise ValueError(f"mode must be one of {PREPROCESS_MODES}, got {self.mode!r}")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        images = _as_image_list(X)
        out = np.empty((len(images), 3, self.input_size, self.input_size), np.float32)
        self.scale_info_ = []
        for i, image in enumerate(images):
            out[i], info = preprocess(image, (self.input_size, self.input_size), self.mode)
            self.scale_info_.append(info)
        return out


class YoloDetector(BaseEstimator):
    """Darknet YOLOv3 detector with pretrained weights.

    ``fit`` does no training: it parses the network definition, loads the
    weights, checks every detection head against its class count and folds
    batchnorm into the convolutions. ``predict`` maps a sequence of RGB
    images to one list of :class:`~darkyolo.decode.Detection` per image,
    with boxes in original-image pixel corners.

    Parameters
    ----------
    netdef : path, optional
        Network definition; defaults to the bundled ``yolov3.cfg``.
    weights : path
        Darknet ``.weights`` file.
    names : path, optional
        Class label file; defaults to the bundled ``coco.names``.
    score_threshold, nms_threshold : float
        Minimum best-class score and per-class suppression IoU, both 0.6.
    input_size : int
        Square network input extent, a multiple of 32.
    mode : {"stretch", "letterbox"}
    compat_256_scale : bool
        Scale normalised boxes to 0..256 instead of the image size.
    fold_batchnorm : bool
        Merge batchnorm into conv weights once at fit time.
    """

    def __init__(self, netdef=None, weights=None, names=None,
                 score_threshold=DEFAULT_SCORE_THRESHOLD, nms_threshold=DEFAULT_NMS_THRESHOLD,
                 input_size=416, mode="stretch", compat_256_scale=False, fold_batchnorm=True):
        self.netdef = netdef
        self.weights = weights
        self.names = names
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.input_size = input_size
        self.mode = mode
        self.compat_256_scale = compat_256_scale
        self.fold_batchnorm = fold_batchnorm

    def _run_config(self):
        return RunConfig(
            netdef=self.netdef, weights=self.weights, names=self.names,
            score_threshold=check_probability(self.score_threshold, "score_threshold"),
            nms_threshold=check_probability(self.nms_threshold, "nms_threshold"),
            input_size=check_input_size(self.input_size), mode=self.mode,
            compat_256_scale=self.compat_256_scale,
        )

    def fit(self, X=None, y=None):
        config = self._run_config()
        if self.weights is None:
            raise ValueError("YoloDetector needs a weights file; use from_graph for in-memory graphs")
        definition = load_netdef(self.netdef or bundled_path("yolov3.cfg"))
        c = definition.input_shape[0]
        definition = replace(definition, input_shape=(c, self.input_size, self.input_size))
        graph = load_weights(self.weights, definition)
        names = load_names(self.names or bundled_path("coco.names"))
        return self._set_fitted(graph, names, config)

    @classmethod
    def from_graph(cls, graph, class_names=None, **params):
        """A fitted detector around an already built :class:`NetworkGraph`."""
        params.setdefault("input_size", graph.input_shape[1])
        det = cls(**params)
        return det._set_fitted(graph, class_names, det._run_config())

    def _set_fitted(self, graph, names, config):
        self.graph_ = fold_graph(graph) if self.fold_batchnorm else graph
        self.plan_ = activation_cache_plan(self.graph_)
        self.class_names_ = list(names) if names is not None else None
        self.config_ = config
        self.n_classes_ = graph.class_count
        return self

    def predict(self, X):
        check_is_fitted(self, "graph_")
        images = _as_image_list(X)
        return [
            detect_image(self.graph_, image if isinstance(image, Frame) else check_image(image),
                         self.config_, self.class_names_, self.plan_, frame_id=i)
            for i, image in enumerate(images)
        ]
