"""
Pipeline orchestration: segment files in, vanishing points, line labels and
horizon out; plus the horizon benchmark and synthetic benchmark export.
"""

import logging
import statistics
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import ValidationError

from spherevp.coarse_net import NetParams, forward, load_model
from spherevp.em_refine import VpCandidate, run_em
from spherevp.errors import DatasetIOError, SphereVpError, TooFewSegments
from spherevp.geometry import (
    MIN_SEGMENT_LENGTH,
    ImageFrame,
    angular_distance,
    consistency_d2_matrix,
    image_point,
    lines_from_segments,
    sphere_to_point,
    to_normalized,
    to_pixels,
)
from spherevp.horizon import (
    HorizonLine,
    TripletChoice,
    auc,
    cumulative_histogram,
    estimate_horizon,
    horizon_endpoints,
    horizon_error,
    line_through_pixels,
)
from spherevp.plots import cumulative_figure, overlay_figure, save_figure
from spherevp.sphere_raster import BinGrid, SphereImage, accumulator_predict, render_sphere_image
from spherevp.synthgen import sample_manhattan_scene, scene_rng
from spherevp.types import (
    BenchSummary,
    DetectionDocument,
    GroundTruthFile,
    HorizonDocument,
    PipelineConfig,
    RasterConfig,
    SegmentsFile,
    SynthConfig,
    VpDocument,
)
from spherevp.utils import Settings, read_json_file, write_json_file, write_text_file

logger = logging.getLogger(__name__)

SEGMENTS_SUFFIX = ".segments.json"
GT_SUFFIX = ".gt.json"
BENCHMARK_FRAME = ImageFrame(512, 512)


# Coarse predictors
# ------------------------

class CoarsePredictor(ABC):
    """Maps a sphere image and its normalized image lines to a vanishing point bin grid."""

    name: str

    @property
    @abstractmethod
    def input_resolution(self) -> int:
        pass

    @abstractmethod
    def predict(self, lines: np.ndarray, image: Optional[SphereImage] = None) -> BinGrid:
        pass


class AccumulatorPredictor(CoarsePredictor):
    """
    Line voting on the bin grid. The grid is scaled to a unit peak so that
    theta_act thresholds it on the same scale as the network's output.
    """

    name = "accumulator"

    def __init__(self, raster: Optional[RasterConfig] = None):
        self.raster = raster or RasterConfig()

    @property
    def input_resolution(self) -> int:
        return self.raster.resolution

    def predict(self, lines: np.ndarray, image: Optional[SphereImage] = None) -> BinGrid:
        grid = accumulator_predict(
            lines, self.raster.grid_n, self.raster.sigma_acc, self.raster.accumulator_supersample
        )
        peak = grid.values.max()
        return grid if peak <= 0 else BinGrid(grid.n, grid.values / peak)


class NetworkPredictor(CoarsePredictor):
    name = "network"

    def __init__(self, params: NetParams):
        self.params = params

    @property
    def input_resolution(self) -> int:
        return self.params.spec.input_resolution

    def predict(self, lines: np.ndarray, image: Optional[SphereImage] = None) -> BinGrid:
        if image is None or image.resolution != self.input_resolution:
            image = render_sphere_image(lines, self.input_resolution)
        return forward(self.params, image)


class PredictorFactory:
    @staticmethod
    def create_predictor(model: Optional[Union[str, Path]] = None, raster: Optional[RasterConfig] = None) -> CoarsePredictor:
        """Network predictor when a model file is given, accumulator baseline otherwise."""
        if model is None:
            return AccumulatorPredictor(raster)
        params = load_model(model)
        if raster is not None and raster.grid_n != params.spec.grid_n:
            logger.warning(f"Model grid n={params.spec.grid_n} overrides configured n={raster.grid_n}")
        return NetworkPredictor(params)


# Detection
# ------------------------

@dataclass
class DetectionResult:
    frame: ImageFrame
    predictor: str
    vps: List[VpCandidate]
    line_labels: np.ndarray
    horizon: HorizonLine
    triplet: Optional[TripletChoice] = None
    iterations: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    sphere_image: Optional[SphereImage] = field(default=None, repr=False)

    def to_document(self, include_timings: bool = False) -> DetectionDocument:
        vps = []
        for c in self.vps:
            coord = c.coord
            p = image_point(c.v)
            pixel = None if p is None else tuple(float(x) for x in to_pixels(np.array(p), self.frame))
            vps.append(VpDocument(
                v=tuple(float(x) for x in c.v),
                alpha=coord.alpha,
                beta=coord.beta,
                support=int(c.support),
                image_point=p,
                pixel=pixel,
            ))
        horizon = HorizonDocument(
            h=tuple(float(x) for x in self.horizon.h),
            endpoints=horizon_endpoints(self.horizon.h, self.frame),
            no_triplet=self.triplet is None,
            triplet=None if self.triplet is None else self.triplet.triplet,
            zenith=None if self.triplet is None else self.triplet.zenith,
            score=None if self.triplet is None else self.triplet.score,
        )
        return DetectionDocument(
            width=self.frame.width,
            height=self.frame.height,
            predictor=self.predictor,
            vps=vps,
            line_labels=[int(l) for l in self.line_labels],
            horizon=horizon,
            iterations=self.iterations,
            timings=self.timings if include_timings else {},
        )


def load_segments_file(path: Union[str, Path]) -> Tuple[ImageFrame, np.ndarray]:
    """Frame and (L, 4) pixel segments; zero-length segments are dropped."""
    try:
        doc = SegmentsFile(**read_json_file(path))
    except ValidationError as e:
        raise DatasetIOError(f"Invalid segments file {path}: {e}") from e
    segments = np.array(doc.segments, dtype=float).reshape(-1, 4)
    lengths = np.hypot(segments[:, 2] - segments[:, 0], segments[:, 3] - segments[:, 1])
    keep = lengths >= MIN_SEGMENT_LENGTH
    if not keep.all():
        logger.warning(f"Dropped {int((~keep).sum())} degenerate segments from {path}")
    return ImageFrame(doc.width, doc.height), segments[keep]


def load_ground_truth(path: Union[str, Path]) -> GroundTruthFile:
    try:
        return GroundTruthFile(**read_json_file(path))
    except ValidationError as e:
        raise DatasetIOError(f"Invalid ground-truth file {path}: {e}") from e


def assign_labels(segments: np.ndarray, vps: List[VpCandidate], labels: np.ndarray, outlier_d2: float) -> np.ndarray:
    """EM argmax labels, with segments inconsistent with their VP marked -1."""
    if not vps:
        return np.full(len(segments), -1)
    d2 = consistency_d2_matrix(segments, np.array([c.v for c in vps]))
    own = d2[np.arange(len(segments)), labels]
    return np.where(own > outlier_d2, -1, labels)


def detect_segments(
    segments: np.ndarray,
    frame: ImageFrame,
    predictor: CoarsePredictor,
    cfg: Optional[PipelineConfig] = None,
) -> DetectionResult:
    cfg = cfg or PipelineConfig()
    segments = np.asarray(segments, dtype=float).reshape(-1, 4)
    if len(segments) < 2:
        raise TooFewSegments(f"Detection needs at least 2 segments, got {len(segments)}")
    timings = {}

    start = time.perf_counter()
    normalized = to_normalized(segments.reshape(-1, 2), frame).reshape(-1, 4)
    lines = lines_from_segments(normalized)
    image = render_sphere_image(lines, predictor.input_resolution)
    timings["render_ms"] = (time.perf_counter() - start) * 1e3

    start = time.perf_counter()
    grid = predictor.predict(lines, image)
    timings["predict_ms"] = (time.perf_counter() - start) * 1e3

    start = time.perf_counter()
    em = run_em(normalized, grid, cfg.em)
    timings["em_ms"] = (time.perf_counter() - start) * 1e3

    start = time.perf_counter()
    horizon, choice = estimate_horizon(em.candidates, cfg.horizon)
    timings["horizon_ms"] = (time.perf_counter() - start) * 1e3

    return DetectionResult(
        frame=frame,
        predictor=predictor.name,
        vps=em.candidates,
        line_labels=assign_labels(normalized, em.candidates, em.labels, 3 * cfg.em.sigma_em),
        horizon=horizon,
        triplet=choice,
        iterations=em.iterations,
        timings=timings,
        sphere_image=image,
    )


def detect(segments_path: Union[str, Path], predictor: CoarsePredictor, cfg: Optional[PipelineConfig] = None) -> DetectionResult:
    frame, segments = load_segments_file(segments_path)
    return detect_segments(segments, frame, predictor, cfg)


def write_detection(result: DetectionResult, path: Union[str, Path], include_timings: bool = False):
    write_text_file(path, result.to_document(include_timings).model_dump_json(indent=2))


def emit_overlay(
    segments: np.ndarray,
    result: DetectionResult,
    path: Optional[Union[str, Path]] = None,
    gt: Optional[GroundTruthFile] = None,
):
    """Overlay figure of segments by VP label and the horizon; saved as SVG when a path is given."""
    frame = result.frame
    fig = overlay_figure(
        segments,
        result.line_labels,
        frame.width,
        frame.height,
        horizon=horizon_endpoints(result.horizon.h, frame),
        gt_horizon=None if gt is None else gt_endpoints(gt),
    )
    if path is not None:
        save_figure(fig, path)
    return fig


# Benchmark
# ------------------------

def gt_horizon_line(gt: GroundTruthFile) -> np.ndarray:
    return line_through_pixels(gt.horizon[0], gt.horizon[1], ImageFrame(gt.width, gt.height))


def gt_endpoints(gt: GroundTruthFile):
    return horizon_endpoints(gt_horizon_line(gt), ImageFrame(gt.width, gt.height))


def match_vps(gt: GroundTruthFile, vps: List[VpCandidate], tolerance: float) -> Tuple[int, int]:
    """(matched, total) ground-truth VPs within tolerance of some detected VP on the sphere."""
    if not gt.vps:
        return 0, 0
    frame = ImageFrame(gt.width, gt.height)
    points = to_normalized(np.array(gt.vps, dtype=float), frame)
    truth = np.column_stack([points, np.ones(len(points))])
    if not vps:
        return 0, len(truth)
    found = np.array([c.v for c in vps])
    dist = angular_distance(truth[:, None, :], found[None, :, :])
    return int(np.sum(dist.min(axis=1) < tolerance)), len(truth)


def list_dataset(dataset_dir: Union[str, Path]) -> List[str]:
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise DatasetIOError(f"Dataset directory not found: {dataset_dir}")
    return sorted(p.name[: -len(SEGMENTS_SUFFIX)] for p in dataset_dir.glob(f"*{SEGMENTS_SUFFIX}"))


def evaluate_image(dataset_dir: Path, name: str, predictor: CoarsePredictor, cfg: PipelineConfig) -> dict:
    row = {"name": name, "error": cfg.bench.max_err, "failed": True, "vps_matched": 0, "vps_total": 0}
    try:
        gt = load_ground_truth(dataset_dir / f"{name}{GT_SUFFIX}")
        result = detect(dataset_dir / f"{name}{SEGMENTS_SUFFIX}", predictor, cfg)
        err = horizon_error(result.horizon.h, gt_horizon_line(gt), result.frame)
        matched, total = match_vps(gt, result.vps, cfg.bench.orthogonal_tolerance)
        row.update(error=err, failed=False, vps_matched=matched, vps_total=total)
    except (SphereVpError, OSError, ValueError) as e:
        logger.warning(f"Benchmark image {name} failed: {e}")
    return row


def bench(
    dataset_dir: Union[str, Path],
    predictor: CoarsePredictor,
    out_dir: Union[str, Path],
    cfg: Optional[PipelineConfig] = None,
) -> BenchSummary:
    """
    Detect every image of a dataset, score its horizon and write errors.csv,
    cumulative.csv, cumulative.svg and summary.json into out_dir.
    Failed images count as max_err.
    """
    cfg = cfg or PipelineConfig()
    dataset_dir, out_dir = Path(dataset_dir), Path(out_dir)
    names = list_dataset(dataset_dir)
    logger.info(f"Benchmarking {len(names)} images from {dataset_dir}")
    start = time.perf_counter()
    workers = cfg.bench.workers or Settings().threads
    with ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda name: evaluate_image(dataset_dir, name, predictor, cfg), names))
    wall_time = time.perf_counter() - start

    df = pd.DataFrame(rows, columns=["name", "error", "failed", "vps_matched", "vps_total"])
    errors = df["error"].to_numpy(dtype=float)
    if len(errors) == 0:
        raise DatasetIOError(f"No *{SEGMENTS_SUFFIX} files in {dataset_dir}")
    xs, fractions = cumulative_histogram(errors, cfg.bench.max_err, cfg.bench.curve_samples)
    score = auc(errors, cfg.bench.max_err)
    vps_total = int(df["vps_total"].sum())
    summary = BenchSummary(
        auc=score,
        mean_err=float(np.mean(errors)),
        median_err=float(statistics.median(errors.tolist())),
        orthogonal_accuracy_at_5deg=float(df["vps_matched"].sum()) / vps_total if vps_total else None,
        images=len(df),
        failures=int(df["failed"].sum()),
        max_err=cfg.bench.max_err,
        wall_time=wall_time,
    )

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        df.to_csv(out_dir / "errors.csv", index=False)
        pd.DataFrame({"error": xs, "fraction": fractions}).to_csv(out_dir / "cumulative.csv", index=False)
    except OSError as e:
        raise DatasetIOError(f"Could not write benchmark reports to {out_dir}: {e}") from e
    save_figure(cumulative_figure(xs, fractions, score), out_dir / "cumulative.svg")
    write_json_file(out_dir / "summary.json", summary.model_dump())
    logger.info(f"AUC {score:.4f} over {len(df)} images, {summary.failures} failures")
    return summary


# Synthetic benchmark export
# ------------------------

def export_benchmark(
    cfg: SynthConfig,
    count: int,
    out_dir: Union[str, Path],
    frame: ImageFrame = BENCHMARK_FRAME,
) -> List[str]:
    """Write Manhattan scenes as pixel-coordinate segment and ground-truth files."""
    out_dir = Path(out_dir)
    names = []
    for i in range(count):
        scene = sample_manhattan_scene(cfg, scene_rng(cfg.seed, 3, i))
        name = f"manhattan_{i:05d}"
        pixels = to_pixels(scene.segments.reshape(-1, 2), frame).reshape(-1, 4)
        vps = []
        for c in scene.true_vps:
            p = image_point(sphere_to_point(c))
            if p is not None:
                vps.append(tuple(float(x) for x in to_pixels(np.array(p), frame)))
        write_text_file(
            out_dir / f"{name}{SEGMENTS_SUFFIX}",
            SegmentsFile(width=frame.width, height=frame.height, segments=pixels.tolist()).model_dump_json(),
        )
        write_text_file(
            out_dir / f"{name}{GT_SUFFIX}",
            GroundTruthFile(
                width=frame.width,
                height=frame.height,
                horizon=horizon_endpoints(scene.horizon, frame),
                vps=vps,
            ).model_dump_json(),
        )
        names.append(name)
    logger.info(f"Wrote {count} benchmark scenes to {out_dir}")
    return names
