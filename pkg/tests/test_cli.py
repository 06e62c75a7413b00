import io
import json
import re

import numpy as np

from darkyolo.cli import main
from darkyolo.netdef import WeightsHeader, expected_float_count, parse_netdef

from conftest import TOY_CFG, write_ppm


def run(argv):
    buf = io.StringIO()
    code = main(argv, out=buf)
    return code, buf.getvalue()


def test_inspect_full_definition():
    code, text = run(["inspect"])
    assert code == 0
    assert "107 layers, 3 detection heads" in text
    for grid, stride in ((13, 32), (26, 16), (52, 8)):
        assert f"grid {grid}x{grid} stride {stride} channels 255" in text
    assert "expected weights floats: 62001757" in text


def test_inspect_other_size():
    code, text = run(["inspect", "--size", "608"])
    assert code == 0
    assert re.findall(r"grid (\d+)x", text) == ["19", "38", "76"]


def test_inspect_empty_definition(tmp_path):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("[net]\nwidth=32\nheight=32\n")
    code, text = run(["inspect", "--netdef", str(cfg)])
    assert code == 0
    assert "0 layers, 0 detection heads" in text


def test_inspect_weights_exact_and_truncated(tmp_path, capsys):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text(TOY_CFG)
    n = expected_float_count(parse_netdef(TOY_CFG))
    body = np.arange(n, dtype="<f4").tobytes()
    good = tmp_path / "good.weights"
    good.write_bytes(WeightsHeader().pack() + body)
    code, text = run(["inspect", "--netdef", str(cfg), "--weights", str(good)])
    assert code == 0
    assert f"weights: {n} floats consumed exactly" in text
    assert "peak live activation buffers:" in text
    bad = tmp_path / "bad.weights"
    bad.write_bytes(WeightsHeader().pack() + body[:-4])
    code, _ = run(["inspect", "--netdef", str(cfg), "--weights", str(bad)])
    assert code == 2
    assert f"expected {n} floats, {n - 1} available" in capsys.readouterr().err


def test_inspect_bad_definition(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[maxpool]\nsize=2\n")
    assert run(["inspect", "--netdef", str(cfg)])[0] == 2
    assert "line 1" in capsys.readouterr().err


def detect_args(files, source, out, *extra):
    cfg, weights, names = files
    return ["detect", str(source), "--netdef", str(cfg), "--weights", str(weights),
            "--names", str(names), "--size", "32", "--out", str(out), *extra]


def test_detect_single_image(tmp_path, const_model_files):
    img = tmp_path / "one.ppm"
    write_ppm(img, np.zeros((48, 64, 3), np.uint8))
    out = tmp_path / "out"
    code, text = run(detect_args(const_model_files, img, out))
    assert code == 0
    assert "frames: 1 processed, 0 failed, 0 skipped; detections: 1" in text
    assert re.search(r"latency ms: mean [\d.]+  median [\d.]+  max [\d.]+  fps [\d.]+", text)
    lines = (out / "records.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[1])
    assert rec["detections"][0]["class_name"] == "person"
    assert [p.name for p in (out / "annotated").iterdir()] == ["one.ppm"]


def test_detect_directory_repeatable(tmp_path, const_model_files, frame_dir):
    out = tmp_path / "out"
    run(detect_args(const_model_files, frame_dir, out, "-v"))
    first = (out / "records.jsonl").read_bytes()
    code, text = run(detect_args(const_model_files, frame_dir, out))
    assert code == 0 and "frames: 3 processed" in text
    assert (out / "records.jsonl").read_bytes() == first


def test_detect_partial_when_frame_skipped(tmp_path, const_model_files, frame_dir):
    (frame_dir / "zzz.ppm").write_bytes(b"P6\n4 4\n255\n")
    code, text = run(detect_args(const_model_files, frame_dir, tmp_path / "out"))
    assert code == 1 and "1 skipped" in text


def test_detect_missing_input(tmp_path, const_model_files):
    assert run(detect_args(const_model_files, tmp_path / "nope", tmp_path / "out"))[0] == 2


def test_detect_requires_weights():
    assert run(["detect", "x.png"])[0] == 2


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))


def records_file(path, video, frames):
    write_lines(path, [{"type": "header", "video": video}]
                + [{"frame_id": i, "detections": d} for i, d in enumerate(frames)])


def test_eval_perfect(tmp_path):
    box = [0, 0, 10, 10]
    records_file(tmp_path / "r.jsonl", "1", [[{"class_id": 0, "confidence": 0.9, "box": box}]])
    write_lines(tmp_path / "gt.jsonl", [{"frame_id": 0, "class_id": 0, "box": box, "video": "1"}])
    out = tmp_path / "rep" / "report.json"
    code, text = run(["eval", str(tmp_path / "r.jsonl"), "--gt", str(tmp_path / "gt.jsonl"),
                      "--out", str(out)])
    assert code == 0
    assert "Video 1 | 1 | 1.000 | 1.000 | 1.000" in text
    assert "mAP: 100.00" in text
    payload = json.loads(out.read_text())
    assert payload["config"]["iou_threshold"] == 0.6
    assert out.with_suffix(".txt").read_text().strip() == text.strip()


def test_eval_empty_ground_truth(tmp_path):
    records_file(tmp_path / "r.jsonl", "1",
                 [[{"class_id": 0, "confidence": 0.9, "box": [0, 0, 1, 1]}]])
    write_lines(tmp_path / "gt.jsonl", [])
    code, text = run(["eval", str(tmp_path / "r.jsonl"), "--gt", str(tmp_path / "gt.jsonl")])
    assert code == 0
    assert "Video 1 | 1 | 0.000 | 0.000 | n/a" in text


def test_eval_malformed_lines_fail(tmp_path, capsys):
    records_file(tmp_path / "r.jsonl", "1", [[]])
    with open(tmp_path / "r.jsonl", "a") as fh:
        fh.write("{broken\n")
    write_lines(tmp_path / "gt.jsonl", [])
    code, _ = run(["eval", str(tmp_path / "r.jsonl"), "--gt", str(tmp_path / "gt.jsonl")])
    assert code == 2
    assert "malformed" in capsys.readouterr().err


def test_unknown_command():
    assert run(["frobnicate"])[0] == 2
