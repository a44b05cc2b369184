"""
Homogeneous point/line algebra and the mapping between the normalized image
plane and the Gaussian sphere.

The image plane sits at unit distance from the sphere centre, so after the
aspect-preserving normalization every finite image point (x, y) corresponds to
the ray (x, y, 1).
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from spherevp.errors import DegenerateSegment, Indeterminate, NearPolarLine

logger = logging.getLogger(__name__)

EPS_L2 = 1e-6  # NearPolarLine guard for the elevation curve
MIN_SEGMENT_LENGTH = 1e-9
HALF_PI = math.pi / 2


@dataclass(frozen=True)
class ImageFrame:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"Invalid image frame {self.width}x{self.height}")

    @property
    def scale(self) -> int:
        return max(self.width, self.height)


@dataclass(frozen=True)
class HomPoint:
    p1: float
    p2: float
    p3: float

    def __post_init__(self):
        if self.p1 == 0 and self.p2 == 0 and self.p3 == 0:
            raise ValueError("Homogeneous point cannot be all zeros")

    @classmethod
    def from_vector(cls, v) -> "HomPoint":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.p1, self.p2, self.p3])

    @property
    def is_finite(self) -> bool:
        return self.p3 != 0


@dataclass(frozen=True)
class HomLine:
    """Image line l1*x + l2*y + l3 = 0, unit norm with canonical sign."""

    l1: float
    l2: float
    l3: float

    @classmethod
    def from_vector(cls, v) -> "HomLine":
        v = canonical_line(np.asarray(v, dtype=float))
        return cls(float(v[0]), float(v[1]), float(v[2]))

    @property
    def vec(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.l3])


@dataclass(frozen=True)
class Segment:
    a: Tuple[float, float]
    b: Tuple[float, float]

    def __post_init__(self):
        if math.hypot(self.a[0] - self.b[0], self.a[1] - self.b[1]) < MIN_SEGMENT_LENGTH:
            raise DegenerateSegment(f"Segment {self.a}-{self.b} has zero length")

    @classmethod
    def from_row(cls, row) -> "Segment":
        return cls((float(row[0]), float(row[1])), (float(row[2]), float(row[3])))

    @property
    def row(self) -> Tuple[float, float, float, float]:
        return (self.a[0], self.a[1], self.b[0], self.b[1])

    @property
    def midpoint(self) -> np.ndarray:
        return np.array([(self.a[0] + self.b[0]) / 2, (self.a[1] + self.b[1]) / 2, 1.0])

    @property
    def length(self) -> float:
        return math.hypot(self.b[0] - self.a[0], self.b[1] - self.a[1])


@dataclass(frozen=True)
class SphereCoord:
    alpha: float
    beta: float

    def __post_init__(self):
        tol = 1e-12
        if not (-HALF_PI - tol <= self.alpha <= HALF_PI + tol):
            raise ValueError(f"Azimuth {self.alpha} outside [-pi/2, pi/2]")
        if not (-HALF_PI - tol <= self.beta <= HALF_PI + tol):
            raise ValueError(f"Elevation {self.beta} outside [-pi/2, pi/2]")


SegmentsLike = Union[np.ndarray, Sequence[Segment]]


# Normalization
# ------------------------

def normalize_transform(frame: ImageFrame) -> np.ndarray:
    w, h, s = frame.width, frame.height, frame.scale
    return np.array([[2.0, 0.0, -w], [0.0, 2.0, -h], [0.0, 0.0, s]]) / s


def apply_homography(H: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map (..., 2) inhomogeneous points through a 3x3 homography."""
    points = np.asarray(points, dtype=float)
    hom = np.concatenate([points, np.ones(points.shape[:-1] + (1,))], axis=-1)
    mapped = hom @ H.T
    return mapped[..., :2] / mapped[..., 2:3]


def to_normalized(points: np.ndarray, frame: ImageFrame) -> np.ndarray:
    return apply_homography(normalize_transform(frame), points)


def to_pixels(points: np.ndarray, frame: ImageFrame) -> np.ndarray:
    return apply_homography(np.linalg.inv(normalize_transform(frame)), points)


# Lines
# ------------------------

def canonical_line(v: np.ndarray) -> np.ndarray:
    """Scale (..., 3) line vectors to unit norm with first nonzero entry >= 0."""
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    first = np.where(v[..., 0] != 0, v[..., 0], np.where(v[..., 1] != 0, v[..., 1], v[..., 2]))
    return np.where((first < 0)[..., None], -v, v)


def segment_to_line(seg: Segment) -> HomLine:
    a = np.array([seg.a[0], seg.a[1], 1.0])
    b = np.array([seg.b[0], seg.b[1], 1.0])
    if np.hypot(*(a[:2] - b[:2])) < MIN_SEGMENT_LENGTH:
        raise DegenerateSegment(f"Segment {seg.a}-{seg.b} has zero length")
    return HomLine.from_vector(np.cross(a, b))


def as_segment_array(segments: SegmentsLike) -> np.ndarray:
    """(L, 4) array of x1, y1, x2, y2 rows."""
    if isinstance(segments, np.ndarray):
        arr = segments.astype(float).reshape(-1, 4)
    else:
        rows = [s.row if isinstance(s, Segment) else np.ravel(s) for s in segments]
        arr = np.array(rows, dtype=float).reshape(-1, 4)
    return arr


def lines_from_segments(segments: SegmentsLike) -> np.ndarray:
    """(L, 3) unit line vectors for an array of segments."""
    arr = as_segment_array(segments)
    a = np.column_stack([arr[:, 0], arr[:, 1], np.ones(len(arr))])
    b = np.column_stack([arr[:, 2], arr[:, 3], np.ones(len(arr))])
    return canonical_line(np.cross(a, b))


def segments_from_array(arr: np.ndarray) -> List[Segment]:
    return [Segment.from_row(row) for row in as_segment_array(arr)]


def clip_segments(arr: np.ndarray, bound: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Liang-Barsky clipping of (L, 4) segments to [-bound, bound]^2.

    Returns the clipped rows and a boolean mask of segments that survived.
    """
    arr = as_segment_array(arr)
    x0, y0 = arr[:, 0], arr[:, 1]
    dx, dy = arr[:, 2] - x0, arr[:, 3] - y0
    t0 = np.zeros(len(arr))
    t1 = np.ones(len(arr))
    keep = np.ones(len(arr), dtype=bool)
    for p, q in ((-dx, x0 + bound), (dx, bound - x0), (-dy, y0 + bound), (dy, bound - y0)):
        parallel = p == 0
        keep &= ~(parallel & (q < 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(parallel, 0.0, q / np.where(parallel, 1.0, p))
        t0 = np.where(~parallel & (p < 0), np.maximum(t0, r), t0)
        t1 = np.where(~parallel & (p > 0), np.minimum(t1, r), t1)
    keep &= t0 <= t1
    clipped = np.column_stack([x0 + t0 * dx, y0 + t0 * dy, x0 + t1 * dx, y0 + t1 * dy])
    return np.clip(clipped, -bound, bound), keep


# Sphere mapping
# ------------------------

def point_to_sphere(p: Union[HomPoint, Sequence[float], np.ndarray]) -> SphereCoord:
    v = p.vec if isinstance(p, HomPoint) else np.asarray(p, dtype=float)
    alpha, beta = vectors_to_angles(v[None, :])[0]
    return SphereCoord(float(alpha), float(beta))


def sphere_to_point(c: SphereCoord) -> np.ndarray:
    return angles_to_vectors(np.array([[c.alpha, c.beta]]))[0]


def front_canonical(v: np.ndarray) -> np.ndarray:
    """Flip (..., 3) vectors onto the front half-sphere (v3 >= 0)."""
    v = np.asarray(v, dtype=float)
    flip = (v[..., 2] < 0) | ((v[..., 2] == 0) & ((v[..., 0] < 0) | ((v[..., 0] == 0) & (v[..., 1] < 0))))
    return np.where(flip[..., None], -v, v)


def vectors_to_angles(v: np.ndarray) -> np.ndarray:
    """(K, 3) homogeneous points -> (K, 2) azimuth/elevation on the front half-sphere."""
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("Homogeneous point cannot be all zeros")
    u = front_canonical(v / norm)
    beta = np.arcsin(np.clip(u[..., 1], -1.0, 1.0))
    alpha = np.arctan2(u[..., 0], u[..., 2])
    # p3 = 0 with p1 < 0 is folded to +pi/2 by front_canonical; keep the closed range
    alpha = np.clip(alpha, -HALF_PI, HALF_PI)
    pole = np.abs(u[..., 1]) >= 1.0 - 1e-15
    alpha = np.where(pole, 0.0, alpha)
    beta = np.where(pole, np.sign(u[..., 1]) * HALF_PI, beta)
    return np.stack([alpha, beta], axis=-1)


def angles_to_vectors(angles: np.ndarray) -> np.ndarray:
    """(K, 2) azimuth/elevation -> (K, 3) unit vectors."""
    angles = np.asarray(angles, dtype=float)
    alpha, beta = angles[..., 0], angles[..., 1]
    cb = np.cos(beta)
    return np.stack([np.sin(alpha) * cb, np.sin(beta), np.cos(alpha) * cb], axis=-1)


def line_elevation(l: HomLine, alpha: float) -> float:
    if abs(l.l2) <= EPS_L2:
        raise NearPolarLine(f"Line {l} has |l2| <= {EPS_L2}; its great circle passes near the poles")
    return math.atan((-l.l1 * math.sin(alpha) - l.l3 * math.cos(alpha)) / l.l2)


def angular_distance(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Angle between undirected directions (antipodes coincide)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    u = u / np.linalg.norm(u, axis=-1, keepdims=True)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    dot = np.sum(u * v, axis=-1)
    aligned = np.where((dot < 0)[..., None], -v, v)
    chord = np.linalg.norm(u - aligned, axis=-1)
    return 2.0 * np.arcsin(np.clip(chord / 2.0, 0.0, 1.0))


# Consistency measures
# ------------------------

def consistency_d1(l: HomLine, v: np.ndarray) -> float:
    return float(np.dot(l.vec, np.asarray(v, dtype=float)))


def consistency_d2(seg: Segment, v: Union[HomPoint, Sequence[float], np.ndarray]) -> float:
    v = v.vec if isinstance(v, HomPoint) else np.asarray(v, dtype=float)
    d = consistency_d2_matrix(as_segment_array([seg]), v[None, :], strict=True)
    return float(d[0, 0])


def consistency_d2_matrix(segments: np.ndarray, vps: np.ndarray, strict: bool = False) -> np.ndarray:
    """
    (L, K) matrix of 1 - cos(angle) between each segment's line and the line
    joining its midpoint to each vanishing point, with undirected folding.

    A VP that coincides with a midpoint has no connecting line; it raises
    Indeterminate when strict, otherwise it counts as fully consistent.
    """
    arr = as_segment_array(segments)
    vps = np.asarray(vps, dtype=float).reshape(-1, 3)
    mid = np.column_stack([(arr[:, 0] + arr[:, 2]) / 2, (arr[:, 1] + arr[:, 3]) / 2, np.ones(len(arr))])
    seg_dir = arr[:, 2:4] - arr[:, 0:2]
    seg_dir = seg_dir / np.linalg.norm(seg_dir, axis=1, keepdims=True)
    # normal of the line m x v, restricted to its (a, b) part
    join = np.cross(mid[:, None, :], vps[None, :, :])
    normal = join[..., :2]
    norm = np.linalg.norm(normal, axis=-1)
    scale = np.linalg.norm(vps, axis=-1)[None, :]
    coincident = norm <= 1e-12 * np.maximum(scale, 1e-300)
    if strict and np.any(coincident):
        raise Indeterminate("Vanishing point coincides with the segment midpoint")
    safe = np.where(coincident, 1.0, norm)
    # the connecting line's direction is perpendicular to its normal
    cos_theta = np.abs(seg_dir[:, None, 0] * normal[..., 1] - seg_dir[:, None, 1] * normal[..., 0]) / safe
    d2 = 1.0 - np.clip(cos_theta, 0.0, 1.0)
    return np.where(coincident, 0.0, d2)


def undirected_angle(dir_a: np.ndarray, dir_b: np.ndarray) -> np.ndarray:
    """Angle in [0, pi/2] between undirected 2D directions."""
    dir_a = np.asarray(dir_a, dtype=float)
    dir_b = np.asarray(dir_b, dtype=float)
    cross = dir_a[..., 0] * dir_b[..., 1] - dir_a[..., 1] * dir_b[..., 0]
    dot = np.sum(dir_a * dir_b, axis=-1)
    return np.arctan2(np.abs(cross), np.abs(dot))


def image_point(v: np.ndarray, eps: float = 1e-12):
    """Inhomogeneous image point of a homogeneous vector, or None at infinity."""
    v = np.asarray(v, dtype=float)
    if abs(v[2]) <= eps * np.linalg.norm(v):
        return None
    return (float(v[0] / v[2]), float(v[1] / v[2]))


def points_to_homogeneous(points: Iterable[Sequence[float]]) -> np.ndarray:
    pts = np.asarray(list(points), dtype=float).reshape(-1, 2)
    return np.column_stack([pts, np.ones(len(pts))])
