#!/usr/bin/env python3
"""
Command-line front end.

    spherevp gen --out data/ [--config synth.json] [--seed S] [--benchmark N]
    spherevp train --data data/ --out model.svpm [--spec net.json] [--grad-check]
    spherevp detect --segments img.segments.json (--model m.svpm | --baseline) --out r.json
    spherevp bench --dataset bench/ (--model m.svpm | --baseline) --out report/
    spherevp calib --vps vps.json [--pair | --triplet] [--rectify AXIS]

Exit code 0 on success, 2 when a benchmark had per-image failures, 1 on
fatal errors.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Type, TypeVar

import numpy as np
from pydantic import BaseModel, ValidationError

from spherevp import coarse_net, harness, horizon, synthgen
from spherevp.errors import SphereVpError
from spherevp.geometry import ImageFrame, normalize_transform, to_normalized
from spherevp.types import NetSpec, PipelineConfig, SynthConfig, TrainConfig, VanishingPointsFile, default_net_spec
from spherevp.utils import configure_logging, read_json_file

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def load_config(path: Optional[str], model: Type[ConfigT], **overrides) -> ConfigT:
    data = read_json_file(path) if path else {}
    data.update({k: v for k, v in overrides.items() if v is not None})
    return model(**data)


def parse_args(argv=None):
    """Parse command-line arguments"""
    parser = argparse.ArgumentParser(prog="spherevp", description="Vanishing point detection on the Gaussian sphere")
    parser.add_argument("--log-level", help="Log level (default: SPHERE_VP_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic training set or Manhattan benchmark")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--config", help="SynthConfig JSON file")
    gen.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    gen.add_argument("--examples-per-kd", type=int, help="Scenes per number of directions (overrides config)")
    gen.add_argument("--benchmark", type=int, metavar="N", help="Write N Manhattan benchmark scenes instead")

    train = sub.add_parser("train", help="Train the coarse network")
    train.add_argument("--data", required=True, help="Dataset directory written by gen")
    train.add_argument("--out", required=True, help="Model file to write")
    train.add_argument("--spec", help="NetSpec JSON file (default: desk-scale architecture)")
    train.add_argument("--config", help="TrainConfig JSON file")
    train.add_argument("--lr", type=float, dest="learning_rate", help="Learning rate")
    train.add_argument("--momentum", type=float, help="SGD momentum")
    train.add_argument("--batch-size", type=int, help="Batch size")
    train.add_argument("--epochs", type=int, help="Number of epochs")
    train.add_argument("--seed", type=int, help="Initialization and shuffling seed")
    train.add_argument("--grad-check", action="store_true", help="Only compare analytic and numeric gradients")

    for name, help_text in (("detect", "Detect vanishing points and the horizon"), ("bench", "Run the horizon benchmark")):
        p = sub.add_parser(name, help=help_text)
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--model", help="Trained model file")
        group.add_argument("--baseline", action="store_true", help="Use the accumulator instead of a network")
        p.add_argument("--config", help="PipelineConfig JSON file")
        p.add_argument("--out", required=True, help="Output file (detect) or directory (bench)")
    detect = sub.choices["detect"]
    detect.add_argument("--segments", required=True, help="Segments JSON file in pixel coordinates")
    detect.add_argument("--overlay", help="Write an SVG overlay here")
    detect.add_argument("--timings", action="store_true", help="Include per-stage timings in the output")
    detect.add_argument("--sphere-image", help="Write the rendered sphere image here as PGM")
    bench = sub.choices["bench"]
    bench.add_argument("--dataset", required=True, help="Directory of *.segments.json and *.gt.json files")
    bench.add_argument("--max-err", type=float, help="AUC error cap (default 0.25)")

    calib = sub.add_parser("calib", help="Intrinsics from orthogonal vanishing points")
    calib.add_argument("--vps", required=True, help="JSON with width, height and pixel vanishing points")
    mode = calib.add_mutually_exclusive_group()
    mode.add_argument("--pair", action="store_true", help="Two VPs, principal point at the image centre")
    mode.add_argument("--triplet", action="store_true", help="Three VPs (default)")
    calib.add_argument("--rectify", choices=["x", "y", "z"], help="Also print the homography sending the first VP to this axis")

    return parser.parse_args(argv)


def run_gen(args) -> int:
    cfg = load_config(args.config, SynthConfig, seed=args.seed, examples_per_kd=args.examples_per_kd)
    if args.benchmark:
        harness.export_benchmark(cfg, args.benchmark, args.out)
    else:
        synthgen.make_dataset(cfg, args.out)
    return 0


def run_train(args) -> int:
    spec = NetSpec(**read_json_file(args.spec)) if args.spec else default_net_spec()
    cfg = load_config(
        args.config, TrainConfig,
        learning_rate=args.learning_rate, momentum=args.momentum,
        batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
    )
    if args.grad_check:
        manifest = synthgen.load_manifest(args.data)
        scene = synthgen.load_scene(Path(args.data) / manifest[0].file)
        example = coarse_net.scene_example(scene, spec)
        worst = coarse_net.gradient_check(coarse_net.init_params(spec, cfg.seed), [example], seed=cfg.seed)
        print(json.dumps({"max_relative_error": worst}))
        return 0
    _, history = coarse_net.train(args.data, spec, cfg, out_path=args.out)
    print(json.dumps(history[-1]))
    return 0


def run_detect(args) -> int:
    cfg = load_config(args.config, PipelineConfig)
    predictor = harness.PredictorFactory.create_predictor(None if args.baseline else args.model, cfg.raster)
    frame, segments = harness.load_segments_file(args.segments)
    result = harness.detect_segments(segments, frame, predictor, cfg)
    harness.write_detection(result, args.out, include_timings=args.timings)
    if args.overlay:
        harness.emit_overlay(segments, result, args.overlay)
    if args.sphere_image:
        result.sphere_image.save_pgm(args.sphere_image)
    return 0


def run_bench(args) -> int:
    cfg = load_config(args.config, PipelineConfig)
    if args.max_err is not None:
        cfg = cfg.model_copy(update={"bench": cfg.bench.model_copy(update={"max_err": args.max_err})})
    predictor = harness.PredictorFactory.create_predictor(None if args.baseline else args.model, cfg.raster)
    summary = harness.bench(args.dataset, predictor, args.out, cfg)
    print(summary.model_dump_json())
    return 2 if summary.failures else 0


def run_calib(args) -> int:
    doc = VanishingPointsFile(**read_json_file(args.vps))
    frame = ImageFrame(doc.width, doc.height)
    points = to_normalized(np.array(doc.vps, dtype=float), frame)
    if args.pair:
        K = horizon.Intrinsics(horizon.focal_from_pair(points[0], points[1]))
    else:
        if len(points) < 3:
            raise SphereVpError("Triplet calibration needs three vanishing points")
        K = horizon.intrinsics_from_triplet(points[0], points[1], points[2])
    pixel = K.to_pixels(frame)
    out = {
        "normalized": {"f": K.f, "u0": K.u0, "v0": K.v0},
        "pixels": {"f": pixel.f, "u0": pixel.u0, "v0": pixel.v0},
    }
    if args.rectify:
        T = normalize_transform(frame)
        H = horizon.rectify_homography(K, points[0], args.rectify)
        H_pix = np.linalg.inv(T) @ H @ T
        out["homography"] = H_pix.tolist()
    print(json.dumps(out, indent=2))
    return 0


COMMANDS = {"gen": run_gen, "train": run_train, "detect": run_detect, "bench": run_bench, "calib": run_calib}


def main(argv=None) -> int:
    args = parse_args(argv)
    configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (SphereVpError, OSError, ValidationError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
