"""
Sphere images of line great circles and the N x N vanishing point bin grid.

Pixel (u, v) of an S x S sphere image covers azimuth column u and elevation
row v; array storage is ``intensities[v, u]`` so rows run along elevation.
Bin grids use the same beta-major, row-major convention.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

from spherevp.errors import DatasetIOError, EmptyInput, IndexOutOfRange
from spherevp.geometry import EPS_L2, HALF_PI, HomLine, SphereCoord, angles_to_vectors

logger = logging.getLogger(__name__)

THETA_ACT = 0.05
SIGMA_ACC = 0.02


@dataclass(frozen=True)
class SphereImage:
    intensities: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.intensities, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"Sphere image must be square, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)

    @property
    def resolution(self) -> int:
        return self.intensities.shape[0]

    def save_pgm(self, path: Union[str, Path]):
        pixels = np.round(np.clip(self.intensities, 0.0, 1.0) * 255).astype(np.uint8)
        try:
            Image.fromarray(pixels).save(path, format="PPM")
        except OSError as e:
            raise DatasetIOError(f"Could not write sphere image {path}: {e}") from e


@dataclass(frozen=True)
class BinGrid:
    n: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=float).reshape(-1)
        if arr.size != self.n * self.n:
            raise ValueError(f"BinGrid of side {self.n} needs {self.n ** 2} values, got {arr.size}")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
            raise ValueError("BinGrid values must be finite and within [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, n: int) -> "BinGrid":
        return cls(n, np.zeros(n * n))

    @property
    def image(self) -> np.ndarray:
        return self.values.reshape(self.n, self.n)

    def to_csv(self, path: Union[str, Path]):
        try:
            np.savetxt(path, self.image, delimiter=",", fmt="%.9g")
        except OSError as e:
            raise DatasetIOError(f"Could not write bin grid {path}: {e}") from e


# Quantization
# ------------------------

def angle_to_index(angle, n: int):
    idx = np.floor((np.asarray(angle, dtype=float) + HALF_PI) / math.pi * n).astype(int)
    return np.clip(idx, 0, n - 1)


def index_to_angle(idx, n: int):
    return (np.asarray(idx, dtype=float) + 0.5) / n * math.pi - HALF_PI


def vp_to_bin(c: SphereCoord, n: int) -> int:
    row = int(angle_to_index(c.beta, n))
    col = int(angle_to_index(c.alpha, n))
    return row * n + col


def bin_center(index: int, n: int) -> SphereCoord:
    if not 0 <= index < n * n:
        raise IndexOutOfRange(f"Bin {index} outside grid of {n * n} bins")
    row, col = divmod(index, n)
    return SphereCoord(float(index_to_angle(col, n)), float(index_to_angle(row, n)))


def bin_center_vectors(n: int) -> np.ndarray:
    """(n^2, 3) unit vectors of all bin centres in index order."""
    centers = index_to_angle(np.arange(n), n)
    beta, alpha = np.meshgrid(centers, centers, indexing="ij")
    return angles_to_vectors(np.stack([alpha.ravel(), beta.ravel()], axis=-1))


def bin_center_angles(n: int) -> np.ndarray:
    """(n^2, 2) azimuth/elevation of all bin centres in index order."""
    centers = index_to_angle(np.arange(n), n)
    beta, alpha = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([alpha.ravel(), beta.ravel()], axis=-1)


# Rendering
# ------------------------

def _as_line_array(lines) -> np.ndarray:
    if isinstance(lines, np.ndarray):
        return lines.reshape(-1, 3).astype(float)
    return np.array([l.vec if isinstance(l, HomLine) else l for l in lines], dtype=float).reshape(-1, 3)


def trace_columns(lines: np.ndarray, resolution: int):
    """Elevation of each curve at every column centre (lines with |l2| > eps only)."""
    alpha = index_to_angle(np.arange(resolution), resolution)
    usable = np.abs(lines[:, 1]) > EPS_L2
    sel = lines[usable]
    beta = np.arctan(
        (-sel[:, 0:1] * np.sin(alpha)[None, :] - sel[:, 2:3] * np.cos(alpha)[None, :]) / sel[:, 1:2]
    )
    rows = angle_to_index(beta, resolution)
    cols = np.broadcast_to(np.arange(resolution), rows.shape)
    return rows.ravel(), cols.ravel()


def trace_rows(lines: np.ndarray, resolution: int):
    """
    Azimuths where each curve crosses every row centre, the algebraic inverse
    of the elevation curve: l1 sin(a) + l3 cos(a) = -l2 tan(b).
    """
    beta = index_to_angle(np.arange(resolution), resolution)
    radius = np.hypot(lines[:, 0], lines[:, 2])
    usable = radius > EPS_L2
    sel, radius = lines[usable], radius[usable]
    psi = np.arctan2(sel[:, 2], sel[:, 0])
    ratio = -sel[:, 1:2] * np.tan(beta)[None, :] / radius[:, None]
    valid = np.abs(ratio) <= 1.0
    base = np.arcsin(np.clip(ratio, -1.0, 1.0))
    rows, cols = [], []
    for candidate in (base - psi[:, None], math.pi - base - psi[:, None]):
        wrapped = (candidate + math.pi) % (2 * math.pi) - math.pi
        ok = valid & (np.abs(wrapped) <= HALF_PI)
        r = np.broadcast_to(np.arange(resolution), ok.shape)[ok]
        rows.append(r)
        cols.append(angle_to_index(wrapped[ok], resolution))
    return np.concatenate(rows), np.concatenate(cols)


def render_sphere_image(lines: Union[Sequence[HomLine], np.ndarray], resolution: int = 128) -> SphereImage:
    """
    Draw each line's great circle as a one-pixel opaque curve.

    Curves are sampled once per column through the elevation curve and once
    per row through its inverse; the union is gap-free for steep and
    near-polar circles alike. Composition is a binary max.
    """
    if resolution < 16:
        raise ValueError(f"Sphere image resolution must be >= 16, got {resolution}")
    image = np.zeros((resolution, resolution), dtype=np.float32)
    arr = _as_line_array(lines)
    if len(arr):
        for rows, cols in (trace_columns(arr, resolution), trace_rows(arr, resolution)):
            image[rows, cols] = 1.0
    return SphereImage(image)


# Prediction helpers
# ------------------------

def accumulator_predict(
    lines: Union[Sequence[HomLine], np.ndarray],
    n: int = 20,
    sigma_acc: float = SIGMA_ACC,
    supersample: int = 1,
) -> BinGrid:
    """
    Mean Gaussian vote of all lines. ``supersample=1`` evaluates bin centres.
    Otherwise every bin is sampled on a ``supersample`` x ``supersample``
    lattice starting at its lower corner, half-open like vp_to_bin, and keeps
    its strongest sample.
    """
    if n < 2:
        raise ValueError(f"Grid side must be >= 2, got {n}")
    if supersample < 1:
        raise ValueError(f"supersample must be >= 1, got {supersample}")
    arr = _as_line_array(lines)
    if len(arr) == 0:
        raise EmptyInput("accumulator_predict needs at least one line")
    if supersample == 1:
        samples = bin_center_vectors(n)
    else:
        fine = n * supersample
        edges = np.arange(fine) / fine * math.pi - HALF_PI
        beta, alpha = np.meshgrid(edges, edges, indexing="ij")
        samples = angles_to_vectors(np.stack([alpha.ravel(), beta.ravel()], axis=-1))
    d = arr @ samples.T
    votes = np.exp(-(d ** 2) / (2 * sigma_acc ** 2)).mean(axis=0)
    votes = votes.reshape(n, supersample, n, supersample).max(axis=(1, 3))
    return BinGrid(n, np.clip(votes, 0.0, 1.0))


def local_maxima(grid: BinGrid, k: int, theta_act: float = THETA_ACT) -> List[int]:
    """Up to k bins that are >= all 8 neighbours and above theta_act, strongest first."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    image = grid.image
    peaks = (image >= maximum_filter(image, size=3, mode="nearest")) & (image > theta_act)
    idx = np.flatnonzero(peaks.ravel())
    order = np.lexsort((idx, -grid.values[idx]))
    return [int(i) for i in idx[order][:k]]
