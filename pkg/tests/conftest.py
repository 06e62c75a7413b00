import numpy as np
import pytest

from darkyolo.netdef import build_graph, parse_netdef, serialize_weights
from darkyolo.tensor import ConvParams

# 1x1 input -> identity 1x1 conv -> 2x upsample -> 6-filter 1x1 conv -> head (B=1, C=1)
TOY_CFG = """\
[net]
channels=1
height=1
width=1

[convolutional]
filters=1
size=1
stride=1
pad=0
activation=linear

[upsample]
stride=2

[convolutional]
filters=6
size=1
stride=1
pad=0
activation=linear

[yolo]
mask=0
anchors=2,3
classes=1
num=1
"""

TOY_INPUT = 2.0
TOY_W = [0.5, -1.0, 0.0, 0.0, 1.0, 2.0]
TOY_B = [0.0, 1.0, 0.25, -0.5, 1.0, -3.0]

# 3x32x32 input -> 32x32/32 conv collapsing to a single cell -> head (B=1, C=1)
CONST_CFG = """\
[net]
channels=3
height=32
width=32

[convolutional]
filters=6
size=32
stride=32
pad=0
activation=linear

[yolo]
mask=0
anchors=16,16
classes=1
num=1
"""


def toy_graph():
    d = parse_netdef(TOY_CFG)
    params = {
        0: ConvParams(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32),
                      activation="linear"),
        2: ConvParams(np.array(TOY_W, np.float32).reshape(6, 1, 1, 1),
                      np.array(TOY_B, np.float32), activation="linear"),
    }
    return build_graph(d, params)


def const_graph(obj_logit=5.0, cls_logit=5.0):
    """Network whose single head cell always holds (0, 0, 0, 0, obj, cls)."""
    d = parse_netdef(CONST_CFG)
    bias = np.array([0, 0, 0, 0, obj_logit, cls_logit], np.float32)
    params = {0: ConvParams(np.zeros((6, 3, 32, 32), np.float32), bias, activation="linear")}
    return build_graph(d, params)


@pytest.fixture
def toy():
    return toy_graph()


@pytest.fixture
def const():
    return const_graph()


@pytest.fixture
def const_model_files(tmp_path):
    """Definition, weights and names files for :func:`const_graph`."""
    cfg = tmp_path / "const.cfg"
    cfg.write_text(CONST_CFG)
    weights = tmp_path / "const.weights"
    weights.write_bytes(serialize_weights(const_graph()))
    names = tmp_path / "one.names"
    names.write_text("person\n")
    return cfg, weights, names


def write_ppm(path, image):
    h, w = image.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(image).tobytes())


@pytest.fixture
def frame_dir(tmp_path):
    """Three small deterministic RGB frames of differing sizes."""
    rng = np.random.default_rng(7)
    d = tmp_path / "frames"
    d.mkdir()
    for i, (h, w) in enumerate([(48, 64), (32, 32), (40, 80)]):
        write_ppm(d / f"f{i:03d}.ppm", rng.integers(0, 256, (h, w, 3), dtype=np.uint8))
    return d


# --- acceptance summary -------------------------------------------------------

_CRITERIA = {}
_RANK = {"SKIP": 0, "PASS": 1, "FAIL": 2}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion id")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        prev = _CRITERIA.get(label, "SKIP")
        _CRITERIA[label] = max(prev, status, key=_RANK.__getitem__)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(f"[{_CRITERIA[label]}] {label}")
