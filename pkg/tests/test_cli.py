import json

import numpy as np
import pytest

from conftest import pencil_scene
from spherevp.cli import load_config, main, parse_args
from spherevp.geometry import ImageFrame, to_pixels
from spherevp.synthgen import random_rotation
from spherevp.types import SegmentsFile, SynthConfig

FRAME = ImageFrame(640, 480)


def test_parse_args_requires_a_predictor():
    with pytest.raises(SystemExit):
        parse_args(["detect", "--segments", "a.json", "--out", "b.json"])
    args = parse_args(["detect", "--segments", "a.json", "--out", "b.json", "--baseline"])
    assert args.baseline and args.model is None


def test_load_config_overrides(tmp_path):
    path = tmp_path / "synth.json"
    path.write_text(json.dumps({"seed": 3, "examples_per_kd": 10}))
    cfg = load_config(str(path), SynthConfig, seed=8, examples_per_kd=None)
    assert cfg.seed == 8
    assert cfg.examples_per_kd == 10


def test_gen_writes_manifest(tmp_path):
    config = tmp_path / "synth.json"
    config.write_text(json.dumps({"k_d_range": [1, 2]}))
    out = tmp_path / "data"
    assert main(["gen", "--out", str(out), "--config", str(config), "--examples-per-kd", "1"]) == 0
    assert len(json.loads((out / "manifest.json").read_text())) == 2


def test_detect_baseline(tmp_path, rng):
    segments, _ = pencil_scene(rng)
    pixels = to_pixels(segments.reshape(-1, 2), FRAME).reshape(-1, 4)
    path = tmp_path / "img.segments.json"
    path.write_text(SegmentsFile(width=640, height=480, segments=pixels.tolist()).model_dump_json())
    out = tmp_path / "result.json"
    assert main(["detect", "--segments", str(path), "--baseline", "--out", str(out), "--timings"]) == 0
    doc = json.loads(out.read_text())
    assert len(doc["line_labels"]) == len(segments)
    assert set(doc["timings"]) == {"render_ms", "predict_ms", "em_ms", "horizon_ms"}


def test_detect_writes_sphere_image(tmp_path, rng):
    segments, _ = pencil_scene(rng)
    pixels = to_pixels(segments.reshape(-1, 2), FRAME).reshape(-1, 4)
    path = tmp_path / "img.segments.json"
    path.write_text(SegmentsFile(width=640, height=480, segments=pixels.tolist()).model_dump_json())
    image = tmp_path / "sphere.pgm"
    argv = ["detect", "--segments", str(path), "--baseline", "--out", str(tmp_path / "r.json"), "--sphere-image", str(image)]
    assert main(argv) == 0
    assert image.read_bytes().startswith(b"P5")


def test_missing_input_is_fatal(tmp_path):
    assert main(["detect", "--segments", str(tmp_path / "missing.json"), "--baseline", "--out", str(tmp_path / "r.json")]) == 1


def test_bench_reports_failures(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "broken.segments.json").write_text("{}")
    (data / "broken.gt.json").write_text(json.dumps({"width": 640, "height": 480, "horizon": [[0, 240], [640, 240]]}))
    assert main(["bench", "--dataset", str(data), "--baseline", "--out", str(tmp_path / "report")]) == 2


def test_calib_triplet(tmp_path, rng, capsys):
    f = 1.3
    K = np.diag([f, f, 1.0])
    while True:
        vps = K @ random_rotation(rng)
        if np.min(np.abs(vps[2])) > 0.2 * np.min(np.linalg.norm(vps, axis=0)):
            break
    points = np.array([vps[:2, i] / vps[2, i] for i in range(3)])
    path = tmp_path / "vps.json"
    path.write_text(json.dumps({"width": 640, "height": 480, "vps": to_pixels(points, FRAME).tolist()}))
    assert main(["calib", "--vps", str(path), "--rectify", "z"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["normalized"]["f"] == pytest.approx(f, rel=1e-6)
    assert out["pixels"]["f"] == pytest.approx(f * 320, rel=1e-6)
    assert out["pixels"]["u0"] == pytest.approx(320.0, abs=1e-4)
    assert np.array(out["homography"]).shape == (3, 3)


def test_calib_pair_rejects_non_orthogonal(tmp_path):
    path = tmp_path / "vps.json"
    path.write_text(json.dumps({"width": 640, "height": 480, "vps": [[400, 240], [500, 240]]}))
    assert main(["calib", "--vps", str(path), "--pair"]) == 1
