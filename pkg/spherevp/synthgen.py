"""
Synthetic line-segment scenes with known vanishing directions.

A scene places clusters of parallel or collinear 3D segments along each
vanishing direction, adds outlier segments of random orientation, projects
everything through a random pinhole camera, perturbs the endpoints and crops
the result to the normalized (-1, 1) x (-1, 1) frame.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from spherevp.errors import DatasetIOError, DegenerateScene
from spherevp.geometry import SphereCoord, canonical_line, clip_segments, lines_from_segments, point_to_sphere
from spherevp.types import CameraDocument, ManifestEntry, SceneFile, SynthConfig
from spherevp.utils import Settings, read_json_file, write_json_file, write_text_file

logger = logging.getLogger(__name__)

MIN_DIRECTION_SEPARATION = math.radians(5.0)
NEAR_PLANE = 0.05
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Camera:
    rotation: np.ndarray = field(repr=False)
    translation: np.ndarray = field(repr=False)
    focal: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise ValueError("Camera rotation must be a proper orthonormal matrix")
        if self.focal <= 0:
            raise ValueError(f"Camera focal must be positive, got {self.focal}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @property
    def K(self) -> np.ndarray:
        return np.diag([self.focal, self.focal, 1.0])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation

    def vanishing_point(self, direction: np.ndarray) -> np.ndarray:
        """Homogeneous image point K R d of a world direction."""
        return self.K @ self.rotation @ np.asarray(direction, dtype=float)

    def horizon(self, up: np.ndarray) -> np.ndarray:
        """Image of the plane orthogonal to ``up``: K^-T R up, unit-normalized."""
        h = np.linalg.inv(self.K).T @ self.rotation @ np.asarray(up, dtype=float)
        return canonical_line(h)

    def to_document(self) -> CameraDocument:
        return CameraDocument(R=self.rotation.tolist(), t=self.translation.tolist(), f=float(self.focal))

    @classmethod
    def from_document(cls, doc: CameraDocument) -> "Camera":
        return cls(np.array(doc.R), np.array(doc.t), doc.f)


@dataclass
class SynthScene:
    segments: np.ndarray  # (L, 4) normalized coordinates
    labels: np.ndarray  # (L,) direction index or -1
    true_vps: List[SphereCoord]
    k_d: int
    camera: Camera
    directions: Optional[np.ndarray] = None  # (k_d, 3) world directions
    horizon: Optional[np.ndarray] = None  # normalized image line, Manhattan scenes only

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=float).reshape(-1, 4)
        self.labels = np.asarray(self.labels, dtype=int).reshape(-1)
        if len(self.labels) != len(self.segments):
            raise ValueError("Every segment needs exactly one label")
        if len(self.true_vps) != self.k_d:
            raise ValueError(f"Scene with k_d={self.k_d} has {len(self.true_vps)} vanishing points")
        if np.any(self.labels < -1) or np.any(self.labels >= self.k_d):
            raise ValueError("Segment labels must lie in [-1, k_d - 1]")

    def to_document(self) -> SceneFile:
        return SceneFile(
            k_d=self.k_d,
            camera=self.camera.to_document(),
            true_vps=[(c.alpha, c.beta) for c in self.true_vps],
            segments=[tuple(row) for row in self.segments.tolist()],
            labels=self.labels.tolist(),
            horizon=None if self.horizon is None else tuple(self.horizon.tolist()),
        )

    @classmethod
    def from_document(cls, doc: SceneFile) -> "SynthScene":
        return cls(
            segments=np.array(doc.segments, dtype=float).reshape(-1, 4),
            labels=np.array(doc.labels, dtype=int),
            true_vps=[SphereCoord(a, b) for a, b in doc.true_vps],
            k_d=doc.k_d,
            camera=Camera.from_document(doc.camera),
            horizon=None if doc.horizon is None else np.array(doc.horizon),
        )


# Directions and cameras
# ------------------------

def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def _too_close(d: np.ndarray, others: List[np.ndarray]) -> bool:
    cos_min = math.cos(MIN_DIRECTION_SEPARATION)
    return any(abs(float(np.dot(d, o))) > cos_min for o in others)


def sample_directions(k_d: int, rng: np.random.Generator) -> np.ndarray:
    """
    k_d unit directions: up to three mutually orthogonal ones, then linear
    combinations of two distinct earlier directions, at least 5 degrees apart.
    """
    if not 1 <= k_d <= 6:
        raise ValueError(f"k_d must lie in [1, 6], got {k_d}")
    basis = random_rotation(rng)
    directions = [basis[:, i] for i in range(min(3, k_d))]
    while len(directions) < k_d:
        i, j = rng.choice(len(directions), size=2, replace=False)
        a, b = rng.uniform(0.2, 1.0, size=2) * rng.choice([-1.0, 1.0], size=2)
        d = a * directions[i] + b * directions[j]
        d = d / np.linalg.norm(d)
        if not _too_close(d, directions):
            directions.append(d)
    return np.array(directions)


def sample_camera(cfg: SynthConfig, rng: np.random.Generator) -> Camera:
    return Camera(
        rotation=random_rotation(rng),
        translation=rng.uniform(-1.0, 1.0, size=3),
        focal=float(rng.uniform(*cfg.focal_range)),
    )


# Segments
# ------------------------

def _perpendicular_basis(d: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    helper = np.eye(3)[int(np.argmin(np.abs(d)))]
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(d, e1)


def _cluster_centre(cfg: SynthConfig, camera: Camera, rng: np.random.Generator) -> np.ndarray:
    """World point whose projection falls inside the frame, at depth in [1, 1 + box]."""
    u = rng.uniform(-0.9, 0.9, size=2)
    depth = rng.uniform(1.0, 1.0 + cfg.cluster_box)
    centre_cam = np.array([u[0] * depth / camera.focal, u[1] * depth / camera.focal, depth])
    return camera.to_world(centre_cam[None, :])[0]


def _cluster_segments(
    cfg: SynthConfig,
    camera: Camera,
    d: np.ndarray,
    rng: np.random.Generator,
    allow_collinear: bool = True,
) -> np.ndarray:
    """(M, 2, 3) world segments of one cluster along direction d."""
    centre = _cluster_centre(cfg, camera, rng)
    e1, e2 = _perpendicular_basis(d)
    count = int(rng.integers(cfg.segments_per_cluster[0], cfg.segments_per_cluster[1] + 1))
    collinear = rng.random() < 0.3 and allow_collinear
    segments = []
    for _ in range(count):
        half = rng.uniform(*cfg.segment_half_length)
        if collinear:
            offset = np.zeros(3)
            shift = rng.uniform(-2.0 * half, 2.0 * half)
        else:
            radius = cfg.cluster_offset * math.sqrt(rng.random())
            angle = rng.uniform(0.0, 2 * math.pi)
            offset = radius * (math.cos(angle) * e1 + math.sin(angle) * e2)
            shift = rng.uniform(-half, half)
        mid = centre + offset + shift * d
        segments.append([mid - half * d, mid + half * d])
    return np.array(segments)


def project_segments(camera: Camera, world: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Project (M, 2, 3) world segments, clipping them at the near plane first.
    Returns (M, 4) image rows and a mask of segments in front of the camera.
    """
    cam = camera.to_camera(world.reshape(-1, 3)).reshape(-1, 2, 3)
    z0, z1 = cam[:, 0, 2], cam[:, 1, 2]
    visible = (z0 > NEAR_PLANE) | (z1 > NEAR_PLANE)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(z0 == z1, 0.0, (NEAR_PLANE - z0) / (z1 - z0))
    t = np.clip(t, 0.0, 1.0)
    cut = cam[:, 0] + t[:, None] * (cam[:, 1] - cam[:, 0])
    start = np.where((z0 > NEAR_PLANE)[:, None], cam[:, 0], cut)
    end = np.where((z1 > NEAR_PLANE)[:, None], cam[:, 1], cut)
    start[~visible] = [0.0, 0.0, 1.0]
    end[~visible] = [0.0, 0.0, 1.0]
    f = camera.focal
    rows = np.column_stack([
        f * start[:, 0] / start[:, 2], f * start[:, 1] / start[:, 2],
        f * end[:, 0] / end[:, 2], f * end[:, 1] / end[:, 2],
    ])
    return rows, visible


def perturb_endpoints(rows: np.ndarray, kind: str, scale: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform noise stays within +-scale per coordinate; gaussian uses scale as sigma."""
    if scale == 0:
        return rows.copy()
    if kind == "uniform":
        return rows + rng.uniform(-scale, scale, size=rows.shape)
    if kind == "gaussian":
        return rows + rng.normal(0.0, scale, size=rows.shape)
    raise ValueError(f"Unknown noise kind {kind!r}")


def _finish_segments(cfg: SynthConfig, rows: np.ndarray, visible: np.ndarray, kind: str, scale: float, rng):
    noisy = perturb_endpoints(rows, kind, scale, rng)
    clipped, inside = clip_segments(noisy)
    lengths = np.hypot(clipped[:, 2] - clipped[:, 0], clipped[:, 3] - clipped[:, 1])
    keep = visible & inside & (lengths >= cfg.min_segment_length)
    return clipped[keep]


def _sample_noise(cfg: SynthConfig, rng: np.random.Generator) -> Tuple[str, float]:
    kind = cfg.noise_kind
    if kind == "either":
        kind = "uniform" if rng.random() < 0.5 else "gaussian"
    return kind, float(rng.uniform(*cfg.noise_scale_range))


def pencil_spread(rows: np.ndarray) -> float:
    """
    Second-smallest eigenvalue of the mean scatter of the segments' unit
    lines; zero when the lines share a single great circle, as collinear
    segments do, so that their common point is not determined.
    """
    if len(rows) < 2:
        return 0.0
    lines = lines_from_segments(rows)
    return float(np.linalg.eigvalsh(lines.T @ lines / len(lines))[1])


def _direction_segments(
    cfg: SynthConfig,
    camera: Camera,
    d: np.ndarray,
    kind: str,
    scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """
    Visible segments along d, resampled until at least min_direction_segments
    survive and their lines spread by min_pencil_spread. The first cluster is
    never collinear.
    """
    for _ in range(cfg.max_retries):
        rows = []
        n_clusters = int(rng.integers(cfg.clusters_per_direction[0], cfg.clusters_per_direction[1] + 1))
        for c in range(n_clusters):
            world = _cluster_segments(cfg, camera, d, rng, allow_collinear=c > 0)
            projected, visible = project_segments(camera, world)
            rows.append(_finish_segments(cfg, projected, visible, kind, scale, rng))
        rows = np.concatenate(rows)
        if len(rows) >= cfg.min_direction_segments and pencil_spread(rows) >= cfg.min_pencil_spread:
            return rows
    raise DegenerateScene(
        f"Direction {d.round(3).tolist()} produced no identifiable pencil after {cfg.max_retries} retries"
    )


def _outlier_segments(
    cfg: SynthConfig,
    camera: Camera,
    count: int,
    kind: str,
    scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exactly count random-orientation segments; ones lost to clipping are redrawn."""
    rows = []
    for _ in range(cfg.max_retries * count):
        if len(rows) == count:
            break
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        half = rng.uniform(*cfg.segment_half_length)
        centre = _cluster_centre(cfg, camera, rng)
        projected, visible = project_segments(camera, np.array([[centre - half * d, centre + half * d]]))
        rows.extend(_finish_segments(cfg, projected, visible, kind, scale, rng))
    if len(rows) < count:
        raise DegenerateScene(f"Only {len(rows)} of {count} outliers survived clipping after {cfg.max_retries * count} draws")
    return np.array(rows).reshape(-1, 4)


def outlier_total(cfg: SynthConfig, inliers: int, rng: np.random.Generator) -> int:
    """outlier_fraction of the final scene when set, else a draw from outlier_count."""
    if cfg.outlier_fraction is not None:
        return int(round(cfg.outlier_fraction / (1.0 - cfg.outlier_fraction) * inliers))
    return int(rng.integers(cfg.outlier_count[0], cfg.outlier_count[1] + 1))


def _scene_from_directions(
    cfg: SynthConfig,
    directions: np.ndarray,
    camera: Camera,
    rng: np.random.Generator,
) -> SynthScene:
    kind, scale = _sample_noise(cfg, rng)
    all_rows, all_labels = [], []
    for label, d in enumerate(directions):
        rows = _direction_segments(cfg, camera, d, kind, scale, rng)
        all_rows.append(rows)
        all_labels.append(np.full(len(rows), label))

    inliers = sum(len(rows) for rows in all_rows)
    outliers = _outlier_segments(cfg, camera, outlier_total(cfg, inliers, rng), kind, scale, rng)
    all_rows.append(outliers)
    all_labels.append(np.full(len(outliers), -1))

    true_vps = [point_to_sphere(camera.vanishing_point(d)) for d in directions]
    return SynthScene(
        segments=np.concatenate(all_rows),
        labels=np.concatenate(all_labels),
        true_vps=true_vps,
        k_d=len(directions),
        camera=camera,
        directions=np.asarray(directions),
    )



def sample_scene(cfg: SynthConfig, k_d: int, rng: np.random.Generator) -> SynthScene:
    directions = sample_directions(k_d, rng)
    camera = sample_camera(cfg, rng)
    return _scene_from_directions(cfg, directions, camera, rng)


def sample_manhattan_scene(
    cfg: SynthConfig,
    rng: np.random.Generator,
    max_roll: float = math.radians(10.0),
    max_pitch: float = math.radians(15.0),
) -> SynthScene:
    """
    Three world axes as directions, world y as vertical. The camera rolls and
    pitches within the given bounds and yaws freely, so the horizon stays
    close to level and the vertical VP is a zenith candidate.
    """
    roll = rng.uniform(-max_roll, max_roll)
    pitch = rng.uniform(-max_pitch, max_pitch)
    yaw = rng.uniform(-math.pi, math.pi)
    rotation = (
        Rotation.from_euler("z", roll) * Rotation.from_euler("x", pitch) * Rotation.from_euler("y", yaw)
    ).as_matrix()
    camera = Camera(rotation, rng.uniform(-1.0, 1.0, size=3), float(rng.uniform(*cfg.focal_range)))
    scene = _scene_from_directions(cfg, np.eye(3), camera, rng)
    scene.horizon = camera.horizon(np.array([0.0, 1.0, 0.0]))
    return scene


def scene_rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


# Datasets
# ------------------------

def scene_file_name(k_d: int, index: int) -> str:
    return f"kd{k_d}_{index:06d}.json"


def _write_scene(cfg: SynthConfig, out_dir: Path, k_d: int, index: int) -> ManifestEntry:
    scene = sample_scene(cfg, k_d, scene_rng(cfg.seed, k_d, index))
    name = scene_file_name(k_d, index)
    write_text_file(out_dir / name, scene.to_document().model_dump_json())
    return ManifestEntry(file=name, k_d=k_d, seed=cfg.seed, index=index)


def make_dataset(cfg: SynthConfig, out_path: Union[str, Path], workers: Optional[int] = None) -> List[ManifestEntry]:
    out_dir = Path(out_path)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Could not create dataset directory {out_dir}: {e}") from e
    tasks = [
        (k_d, i)
        for k_d in range(cfg.k_d_range[0], cfg.k_d_range[1] + 1)
        for i in range(cfg.examples_per_kd)
    ]
    logger.info(f"Generating {len(tasks)} scenes into {out_dir}")
    with ThreadPoolExecutor(max_workers=workers or Settings().threads) as pool:
        manifest = list(pool.map(lambda task: _write_scene(cfg, out_dir, *task), tasks))
    write_json_file(out_dir / MANIFEST_NAME, [entry.model_dump() for entry in manifest])
    return manifest


def load_manifest(data_dir: Union[str, Path]) -> List[ManifestEntry]:
    data = read_json_file(Path(data_dir) / MANIFEST_NAME)
    return [ManifestEntry(**entry) for entry in data]


def load_scene(path: Union[str, Path]) -> SynthScene:
    return SynthScene.from_document(SceneFile(**read_json_file(path)))
