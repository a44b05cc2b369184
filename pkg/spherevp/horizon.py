"""
Horizon estimation from refined vanishing points, the horizon error metrics
and camera calibration from orthogonal vanishing points.

All lines and points are in normalized image coordinates unless a function
takes an ImageFrame, in which case it converts to pixels at the boundary.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from spherevp.errors import (
    AntipodalDirection,
    CollinearTriplet,
    DegenerateFit,
    EmptyInput,
    ImaginaryFocal,
    NoValidTriplet,
    VerticalLine,
)
from spherevp.geometry import ImageFrame, angular_distance, canonical_line, image_point, normalize_transform
from spherevp.em_refine import VpCandidate
from spherevp.types import HorizonConfig

logger = logging.getLogger(__name__)

VERTICAL_EPS = 1e-9
AXES = {"x": np.array([1.0, 0.0, 0.0]), "y": np.array([0.0, 1.0, 0.0]), "z": np.array([0.0, 0.0, 1.0])}

PointLike = Union[Sequence[float], np.ndarray]


@dataclass(frozen=True)
class HorizonLine:
    h: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "h", canonical_line(np.asarray(self.h, dtype=float)))

    @property
    def slope_angle(self) -> float:
        """Unsigned angle to the image x-axis, in [0, pi/2]."""
        return math.atan2(abs(self.h[0]), abs(self.h[1]))

    def y_at(self, x: float) -> float:
        if abs(self.h[1]) < VERTICAL_EPS:
            raise VerticalLine(f"Horizon {self.h.tolist()} is vertical")
        return float(-(self.h[0] * x + self.h[2]) / self.h[1])

    @classmethod
    def level(cls, y: float = 0.0) -> "HorizonLine":
        return cls(np.array([0.0, 1.0, -y]))


@dataclass(frozen=True)
class TripletChoice:
    triplet: Tuple[int, int, int]
    zenith: int
    score: float


@dataclass(frozen=True)
class Intrinsics:
    f: float
    u0: float = 0.0
    v0: float = 0.0

    def __post_init__(self):
        if not self.f > 0:
            raise ValueError(f"Focal length must be positive, got {self.f}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.f, 0.0, self.u0], [0.0, self.f, self.v0], [0.0, 0.0, 1.0]])

    def to_pixels(self, frame: ImageFrame) -> "Intrinsics":
        """Same camera expressed in pixel units of the given frame."""
        K = np.linalg.inv(normalize_transform(frame)) @ self.K
        return Intrinsics(float(K[0, 0]), float(K[0, 2] / K[2, 2]), float(K[1, 2] / K[2, 2]))


# Triplet selection
# ------------------------

def _principal(cfg: HorizonConfig) -> np.ndarray:
    return np.array([cfg.c[0], cfg.c[1], 1.0])


def is_zenith(c: VpCandidate, theta_z: float) -> bool:
    return abs(c.coord.beta) > theta_z


def line_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in [0, pi/2] between two image lines."""
    na, nb = a[:2], b[:2]
    cross = abs(na[0] * nb[1] - na[1] * nb[0])
    return math.atan2(cross, abs(float(np.dot(na, nb))))


def triplet_score(phi_hz: float, supports: Sequence[int]) -> float:
    return (1.0 - math.cos(phi_hz)) * float(sum(supports))


def _tentative_horizon(a: VpCandidate, b: VpCandidate, cfg: HorizonConfig) -> Optional[np.ndarray]:
    if angular_distance(a.v, b.v) < cfg.min_vp_separation:
        return None
    h = np.cross(a.v, b.v)
    if np.linalg.norm(h[:2]) < VERTICAL_EPS * max(np.linalg.norm(h), 1e-300):
        return None
    if math.atan2(abs(h[0]), abs(h[1])) > cfg.theta_hor:
        return None
    return h


def zenith_line(v_z: np.ndarray, c: np.ndarray) -> Optional[np.ndarray]:
    l_zc = np.cross(v_z, c)
    if np.linalg.norm(l_zc[:2]) < 1e-12:
        return None
    return l_zc


def select_triplet(candidates: List[VpCandidate], cfg: HorizonConfig) -> TripletChoice:
    """
    Best triplet among the n_vp strongest candidates with exactly one zenith
    candidate. Indices refer to the input list.
    """
    order = sorted(range(len(candidates)), key=lambda k: (-candidates[k].support, k))[: cfg.n_vp]
    c = _principal(cfg)
    best, best_key = None, None
    for triplet in itertools.combinations(sorted(order), 3):
        zeniths = [k for k in triplet if is_zenith(candidates[k], cfg.theta_z)]
        if len(zeniths) != 1:
            continue
        z = zeniths[0]
        a, b = [candidates[k] for k in triplet if k != z]
        h = _tentative_horizon(a, b, cfg)
        l_zc = zenith_line(candidates[z].v, c)
        if h is None or l_zc is None:
            continue
        supports = [candidates[k].support for k in triplet]
        score = triplet_score(line_angle(h, l_zc), supports)
        # larger score, then larger support, then lexicographically smaller triplet
        key = (score, sum(supports), tuple(-k for k in triplet))
        if best_key is None or key > best_key:
            best, best_key = TripletChoice(triplet, z, score), key
    if best is None:
        raise NoValidTriplet(f"No admissible triplet among {len(order)} candidates")
    return best


# Horizon fit
# ------------------------

def fit_horizon(triplet: Tuple[int, int, int], zenith: int, candidates: List[VpCandidate], cfg: HorizonConfig) -> HorizonLine:
    """
    Horizon perpendicular to the zenith line through the principal point, with
    its offset the closed-form weighted least-squares fit to the two other
    VPs. VPs at infinity carry no weight.
    """
    c = _principal(cfg)
    l_zc = zenith_line(candidates[zenith].v, c)
    if l_zc is None:
        raise DegenerateFit("Zenith coincides with the principal point")
    normal = np.array([-l_zc[1], l_zc[0]]) / np.linalg.norm(l_zc[:2])
    num = den = 0.0
    for k in triplet:
        if k == zenith:
            continue
        p = image_point(candidates[k].v)
        if p is None:
            continue
        dist = max(math.hypot(p[0] - c[0], p[1] - c[1]), 1e-12)
        w = candidates[k].support / dist
        num += w * float(np.dot(normal, p))
        den += w
    if den <= 0:
        raise DegenerateFit("No finite horizontal vanishing point carries weight")
    return HorizonLine(np.array([normal[0], normal[1], -num / den]))


def horizon_objective(h: np.ndarray, points: Sequence[PointLike], weights: Sequence[float]) -> float:
    """Weighted squared algebraic residuals sum w_i (h . (x_i, y_i, 1))^2."""
    pts = np.column_stack([np.asarray(points, dtype=float).reshape(-1, 2), np.ones(len(points))])
    return float(np.sum(np.asarray(weights) * (pts @ h) ** 2))


def estimate_horizon(candidates: List[VpCandidate], cfg: HorizonConfig) -> Tuple[HorizonLine, Optional[TripletChoice]]:
    """Triplet selection and fit; falls back to the level line through the principal point."""
    try:
        choice = select_triplet(candidates, cfg)
        return fit_horizon(choice.triplet, choice.zenith, candidates, cfg), choice
    except (NoValidTriplet, DegenerateFit) as e:
        logger.info(f"Using fallback horizon: {e}")
        return HorizonLine.level(cfg.c[1]), None


# Metrics
# ------------------------

def to_pixel_line(h: np.ndarray, frame: ImageFrame) -> np.ndarray:
    return normalize_transform(frame).T @ np.asarray(h, dtype=float)


def from_pixel_line(h_pix: np.ndarray, frame: ImageFrame) -> np.ndarray:
    return canonical_line(np.linalg.inv(normalize_transform(frame)).T @ np.asarray(h_pix, dtype=float))


def line_through_pixels(p: PointLike, q: PointLike, frame: ImageFrame) -> np.ndarray:
    """Normalized image line through two pixel points."""
    h_pix = np.cross([p[0], p[1], 1.0], [q[0], q[1], 1.0])
    return from_pixel_line(h_pix, frame)


def horizon_endpoints(h: np.ndarray, frame: ImageFrame) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    """Pixel points of the horizon at x = 0 and x = width."""
    line = to_pixel_line(h, frame)
    if abs(line[1]) < VERTICAL_EPS * np.linalg.norm(line):
        raise VerticalLine("Horizon is vertical in the image")
    ys = [float(-(line[0] * x + line[2]) / line[1]) for x in (0.0, float(frame.width))]
    return (0.0, ys[0]), (float(frame.width), ys[1])


def horizon_error(h_est: np.ndarray, h_true: np.ndarray, frame: ImageFrame) -> float:
    """Largest vertical distance between the lines at the image borders, over the image height."""
    for name, h in (("estimated", h_est), ("true", h_true)):
        h = canonical_line(np.asarray(h, dtype=float))
        if abs(h[1]) < VERTICAL_EPS:
            raise VerticalLine(f"The {name} horizon is vertical")
    est = horizon_endpoints(h_est, frame)
    true = horizon_endpoints(h_true, frame)
    return max(abs(e[1] - t[1]) for e, t in zip(est, true)) / frame.height


def auc(errors: Sequence[float], max_err: float = 0.25) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise EmptyInput("AUC needs at least one error value")
    if max_err <= 0:
        raise ValueError(f"max_err must be positive, got {max_err}")
    return float(np.mean(1.0 - np.minimum(errors, max_err) / max_err))


def cumulative_histogram(errors: Sequence[float], max_err: float = 0.25, samples: int = 101) -> Tuple[np.ndarray, np.ndarray]:
    """Fraction of images with error <= x at evenly spaced x over [0, max_err]."""
    errors = np.sort(np.asarray(errors, dtype=float))
    if errors.size == 0:
        raise EmptyInput("Cumulative histogram needs at least one error value")
    xs = np.linspace(0.0, max_err, samples)
    fractions = np.searchsorted(errors, xs, side="right") / errors.size
    return xs, fractions


# Calibration
# ------------------------

def _as_point(p: PointLike) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 3:
        if abs(p[2]) < 1e-12:
            raise ValueError("Calibration needs finite vanishing points")
        return p[:2] / p[2]
    return p[:2]


def intrinsics_from_triplet(v1: PointLike, v2: PointLike, v3: PointLike) -> Intrinsics:
    """
    Zero-skew, square-pixel camera from three orthogonal vanishing points via
    the null space of the absolute-conic constraints v_i^T w v_j = 0.
    """
    pts = [_as_point(v) for v in (v1, v2, v3)]
    a, b, c = pts
    scale = max(1.0, *(float(np.linalg.norm(p)) for p in pts))
    if abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])) < 1e-12 * scale ** 2:
        raise CollinearTriplet("Vanishing points are collinear")
    rows = []
    for p, q in ((a, b), (a, c), (b, c)):
        rows.append([p[0] * q[0] + p[1] * q[1], p[0] + q[0], p[1] + q[1], 1.0])
    _, s, vh = np.linalg.svd(np.array(rows))
    if s[2] < 1e-12 * s[0]:
        raise CollinearTriplet("Absolute-conic constraints are rank deficient")
    w1, w2, w3, w4 = vh[-1]
    if abs(w1) < 1e-15:
        raise CollinearTriplet("Conic has no finite principal point")
    u0, v0 = -w2 / w1, -w3 / w1
    f2 = w4 / w1 - u0 ** 2 - v0 ** 2
    if f2 <= 0:
        raise ImaginaryFocal(f"Solved f^2 = {f2:.3g} is not positive; the triplet is not orthogonal")
    return Intrinsics(math.sqrt(f2), float(u0), float(v0))


def focal_from_pair(v1: PointLike, v2: PointLike, c: PointLike = (0.0, 0.0)) -> float:
    c = np.asarray(c, dtype=float)
    d = -float(np.dot(_as_point(v1) - c, _as_point(v2) - c))
    if d <= 0:
        raise ImaginaryFocal(f"Vanishing points give f^2 = {d:.3g}; they are not orthogonal for this principal point")
    return math.sqrt(d)


def back_project(K: Intrinsics, v: PointLike) -> np.ndarray:
    """Unit viewing direction of an image point, or of a homogeneous 3-vector."""
    v = np.asarray(v, dtype=float).reshape(-1)
    hom = v if v.size == 3 else np.array([v[0], v[1], 1.0])
    d = np.linalg.solve(K.K, hom)
    return d / np.linalg.norm(d)


def rectify_homography(K: Intrinsics, v: PointLike, axis: str, strict: bool = False) -> np.ndarray:
    """H = K R K^-1 for the minimal rotation R taking v's direction onto the axis."""
    if axis not in AXES:
        raise ValueError(f"Axis must be one of {sorted(AXES)}, got {axis!r}")
    d = back_project(K, v)
    target = AXES[axis]
    cross = np.cross(d, target)
    sin, cos = float(np.linalg.norm(cross)), float(np.dot(d, target))
    if sin < 1e-12:
        if cos > 0:
            return np.eye(3)
        if strict:
            raise AntipodalDirection(f"Direction {d.tolist()} is opposite the {axis} axis")
        perpendicular = np.cross(target, AXES["x"] if axis != "x" else AXES["y"])
        logger.warning(f"Direction is antipodal to the {axis} axis; rotating about {perpendicular.tolist()}")
        rotvec = math.pi * perpendicular / np.linalg.norm(perpendicular)
    else:
        rotvec = cross / sin * math.atan2(sin, cos)
    R = Rotation.from_rotvec(rotvec).as_matrix()
    return K.K @ R @ np.linalg.inv(K.K)
