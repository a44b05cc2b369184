"""
EM refinement of coarse vanishing point candidates.

Candidates start at the strongest local maxima of the bin grid, which also
provides a Gaussian-mixture prior over the sphere. The E-step mixes each
segment's posterior with the posterior of similar nearby segments; the M-step
fits every candidate as the smallest eigenvector of its weighted line scatter.
Every few iterations the most spread-out in-image cluster is split by segment
orientation and near-duplicate candidates are merged.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from spherevp.errors import (
    AllZeroGrid,
    DegenerateCandidate,
    NoCandidates,
    NumericalUnderflow,
    TooFewSegments,
)
from spherevp.geometry import (
    SphereCoord,
    angular_distance,
    as_segment_array,
    consistency_d2_matrix,
    front_canonical,
    image_point,
    lines_from_segments,
    sphere_to_point,
    undirected_angle,
    vectors_to_angles,
)
from spherevp.sphere_raster import BinGrid, bin_center, bin_center_angles, local_maxima
from spherevp.types import EmConfig

logger = logging.getLogger(__name__)

EIGEN_GAP = 1e-12
MIN_SPLIT_SEGMENTS = 4


@dataclass
class VpCandidate:
    v: np.ndarray
    support: int = 0
    prior_weight: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        self.v = front_canonical(v / np.linalg.norm(v))

    @property
    def coord(self) -> SphereCoord:
        alpha, beta = vectors_to_angles(self.v[None, :])[0]
        return SphereCoord(float(alpha), float(beta))

    def to_json(self) -> dict:
        c = self.coord
        return {"v": self.v.tolist(), "alpha": c.alpha, "beta": c.beta, "support": int(self.support)}


@dataclass
class EmState:
    candidates: List[VpCandidate]
    affinities: np.ndarray  # (L, K), rows sum to 1
    line_weights: np.ndarray  # (L,)
    iteration: int = 0

    @property
    def vectors(self) -> np.ndarray:
        return np.array([c.v for c in self.candidates]).reshape(-1, 3)


@dataclass
class EmResult:
    candidates: List[VpCandidate]
    affinities: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    iterations: int = 0

    def to_json(self) -> dict:
        return {
            "candidates": [c.to_json() for c in self.candidates],
            "labels": [int(l) for l in self.labels],
            "iterations": self.iterations,
        }


# Prior
# ------------------------

@dataclass(frozen=True)
class PriorMixture:
    """Isotropic Gaussians in (alpha, beta) at bin centres, weighted by grid score."""

    centers: np.ndarray = field(repr=False)  # (M, 2)
    weights: np.ndarray = field(repr=False)  # (M,), sums to 1
    sigma: float = 0.1

    def density(self, coords: np.ndarray) -> np.ndarray:
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        d2 = np.sum((coords[:, None, :] - self.centers[None, :, :]) ** 2, axis=-1)
        norm = 1.0 / (2 * math.pi * self.sigma ** 2)
        return norm * np.exp(-d2 / (2 * self.sigma ** 2)) @ self.weights

    def __call__(self, c: SphereCoord) -> float:
        return float(self.density(np.array([[c.alpha, c.beta]]))[0])


def prior_from_grid(grid: BinGrid, sigma_prior: float) -> PriorMixture:
    total = grid.values.sum()
    if total <= 0:
        raise AllZeroGrid("Bin grid has no positive score to build a prior from")
    active = np.flatnonzero(grid.values > 0)
    return PriorMixture(
        centers=bin_center_angles(grid.n)[active],
        weights=grid.values[active] / total,
        sigma=sigma_prior,
    )


def init_candidates(grid: BinGrid, k_init: int, theta_act: float = 0.05) -> List[VpCandidate]:
    peaks = local_maxima(grid, k_init, theta_act)
    if not peaks:
        raise NoCandidates(f"No bin above {theta_act} is a local maximum")
    return [
        VpCandidate(sphere_to_point(bin_center(b, grid.n)), prior_weight=float(grid.values[b]))
        for b in peaks
    ]


# Segment similarity
# ------------------------

def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.sum((p - a) * ab, axis=-1) / np.maximum(np.sum(ab * ab, axis=-1), 1e-300)
    t = np.clip(t, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def segment_distances(segments: np.ndarray) -> np.ndarray:
    """(L, L) shortest Euclidean distances between 2D segments, 0 where they cross."""
    arr = as_segment_array(segments)
    a, b = arr[:, 0:2], arr[:, 2:4]
    ai, bi = a[:, None, :], b[:, None, :]
    aj, bj = a[None, :, :], b[None, :, :]
    endpoint = np.minimum.reduce([
        _point_segment_distance(ai, aj, bj),
        _point_segment_distance(bi, aj, bj),
        _point_segment_distance(aj, ai, bi),
        _point_segment_distance(bj, ai, bi),
    ])
    o1 = _cross2(bi - ai, aj - ai)
    o2 = _cross2(bi - ai, bj - ai)
    o3 = _cross2(bj - aj, ai - aj)
    o4 = _cross2(bj - aj, bi - aj)
    crossing = (o1 * o2 < 0) & (o3 * o4 < 0)
    return np.where(crossing, 0.0, endpoint)


def similarity_matrix(segments: np.ndarray, cfg: EmConfig) -> np.ndarray:
    """Symmetric (L, L) matrix S_ij = cos(phi_ij) exp(-d_ij^2 / sigma^2) with unit diagonal."""
    arr = as_segment_array(segments)
    dirs = arr[:, 2:4] - arr[:, 0:2]
    angle = undirected_angle(dirs[:, None, :], dirs[None, :, :])
    phi = np.minimum(cfg.k_phi * angle, math.pi / 2)
    dist = segment_distances(arr)
    s = np.cos(phi) * np.exp(-(dist ** 2) / cfg.sigma_sim ** 2)
    s = (s + s.T) / 2
    np.fill_diagonal(s, 1.0)
    return s


def similarity(seg_i, seg_j, cfg: EmConfig) -> float:
    return float(similarity_matrix(as_segment_array([seg_i, seg_j]), cfg)[0, 1])


# E and M steps
# ------------------------

def candidate_prior(candidates: List[VpCandidate], prior: Optional[PriorMixture]) -> np.ndarray:
    """p(v_k) at the current candidate positions, normalized over candidates."""
    k = len(candidates)
    if prior is None:
        return np.full(k, 1.0 / k)
    angles = vectors_to_angles(np.array([c.v for c in candidates]))
    p = prior.density(angles)
    total = p.sum()
    if not np.isfinite(total) or total <= 0:
        return np.full(k, 1.0 / k)
    return p / total


def _normalize_rows(m: np.ndarray, strict: bool, what: str) -> np.ndarray:
    sums = m.sum(axis=1, keepdims=True)
    bad = ~np.isfinite(sums[:, 0]) | (sums[:, 0] <= 0)
    if np.any(bad):
        if strict:
            raise NumericalUnderflow(f"{int(bad.sum())} {what} rows normalize to zero")
        logger.warning(f"{int(bad.sum())} {what} rows underflowed; using uniform affinities for them")
        m = m.copy()
        m[bad] = 1.0
        sums = m.sum(axis=1, keepdims=True)
    return m / sums


def e_step(
    segments: np.ndarray,
    lines: np.ndarray,
    candidates: List[VpCandidate],
    prior: Optional[PriorMixture],
    cfg: EmConfig,
    sim: Optional[np.ndarray] = None,
    strict: bool = False,
    sigma: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Affinities (L, K) and line weights (L,) for the current candidates.
    ``sigma`` overrides cfg.sigma_em as the width of the d2 likelihood.
    """
    if not candidates:
        raise NoCandidates("E-step needs at least one candidate")
    sigma = cfg.sigma_em if sigma is None else sigma
    vps = np.array([c.v for c in candidates])
    d2 = consistency_d2_matrix(segments, vps)
    likelihood = np.exp(-(d2 ** 2) / (2 * sigma ** 2))
    base = _normalize_rows(likelihood * candidate_prior(candidates, prior)[None, :], strict, "posterior")

    if sim is None:
        sim = similarity_matrix(segments, cfg)
    pos = np.maximum(sim, 0.0)
    consensus = (pos @ base) / pos.sum(axis=1, keepdims=True)
    mixed = (1.0 - cfg.lambda_mix) * base + cfg.lambda_mix * consensus
    affinities = _normalize_rows(mixed, strict, "affinity")

    support = pos.sum(axis=1) - np.diag(pos)
    top = support.max() if len(support) else 0.0
    if top > 0:
        weights = cfg.eps_weight + (1.0 - cfg.eps_weight) * support / top
    else:
        weights = np.ones(len(lines))
    return affinities, weights


def fit_vanishing_point(lines: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Unit v minimizing sum_i weights_i (l_i . v)^2, on the front half-sphere."""
    lines = np.asarray(lines, dtype=float).reshape(-1, 3)
    scatter = (lines * weights[:, None]).T @ lines
    vals, vecs = np.linalg.eigh(scatter)
    if vals[1] - vals[0] <= EIGEN_GAP:
        raise DegenerateCandidate("Smallest eigenvalues coincide; vanishing direction is undetermined")
    return front_canonical(vecs[:, 0])


def m_step(
    lines: np.ndarray,
    affinities: np.ndarray,
    line_weights: np.ndarray,
    previous: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    (K, 3) refitted candidates. A candidate without weight or with a
    degenerate scatter keeps its previous position when one is given.
    """
    lines = np.asarray(lines, dtype=float).reshape(-1, 3)
    out = []
    degenerate = 0
    for k in range(affinities.shape[1]):
        w = line_weights * affinities[:, k]
        try:
            if w.sum() <= 0:
                raise DegenerateCandidate(f"Candidate {k} has no weight")
            out.append(fit_vanishing_point(lines, w))
        except DegenerateCandidate:
            if previous is None:
                raise
            degenerate += 1
            out.append(previous[k])
    if degenerate:
        logger.debug(f"{degenerate} degenerate M-step solutions kept their previous position")
    return np.array(out).reshape(-1, 3)


def objective(lines: np.ndarray, affinities: np.ndarray, line_weights: np.ndarray, vps: np.ndarray) -> float:
    residual = (np.asarray(lines).reshape(-1, 3) @ np.asarray(vps).reshape(-1, 3).T) ** 2
    return float(np.sum(line_weights[:, None] * affinities * residual))


# Split and merge
# ------------------------

def _doubled_angles(segments: np.ndarray) -> np.ndarray:
    d = segments[:, 2:4] - segments[:, 0:2]
    return 2.0 * np.arctan2(d[:, 1], d[:, 0])


def circular_std(doubled: np.ndarray) -> float:
    r = np.abs(np.mean(np.exp(1j * doubled)))
    if r <= 0:
        return math.inf
    return math.sqrt(max(-2.0 * math.log(min(r, 1.0)), 0.0))


def two_means_angles(doubled: np.ndarray, iters: int = 20) -> np.ndarray:
    """Boolean membership of the second cluster of a 2-means on the circle."""
    z = np.exp(1j * doubled)
    mean = np.angle(np.mean(z))
    c1 = doubled[int(np.argmin(np.cos(doubled - mean)))]
    c2 = doubled[int(np.argmin(np.cos(doubled - c1)))]
    member = np.cos(doubled - c2) > np.cos(doubled - c1)
    for _ in range(iters):
        if member.all() or not member.any():
            break
        c1 = np.angle(np.mean(z[~member]))
        c2 = np.angle(np.mean(z[member]))
        updated = np.cos(doubled - c2) > np.cos(doubled - c1)
        if np.array_equal(updated, member):
            break
        member = updated
    return member


def _in_frame(v: np.ndarray, bound: float) -> bool:
    p = image_point(v)
    return p is not None and abs(p[0]) <= bound and abs(p[1]) <= bound


def _split(state: EmState, segments: np.ndarray, lines: np.ndarray, bound: float) -> EmState:
    labels = np.argmax(state.affinities, axis=1)
    best, best_std = None, -1.0
    for k, cand in enumerate(state.candidates):
        members = np.flatnonzero(labels == k)
        if len(members) < MIN_SPLIT_SEGMENTS or not _in_frame(cand.v, bound):
            continue
        spread = circular_std(_doubled_angles(segments[members]))
        if spread > best_std:
            best, best_std = k, spread
    if best is None:
        return state

    members = np.flatnonzero(labels == best)
    second = two_means_angles(_doubled_angles(segments[members]))
    groups = [members[~second], members[second]]
    if min(len(g) for g in groups) < 2:
        return state
    try:
        fitted = [fit_vanishing_point(lines[g], state.line_weights[g]) for g in groups]
    except DegenerateCandidate:
        return state
    logger.debug(f"Split candidate {best} ({len(members)} segments, circular std {best_std:.3f})")

    candidates = list(state.candidates)
    candidates[best] = VpCandidate(fitted[0], support=len(groups[0]), prior_weight=candidates[best].prior_weight)
    candidates.append(VpCandidate(fitted[1], support=len(groups[1]), prior_weight=candidates[best].prior_weight))
    affinities = np.zeros((len(labels), len(candidates)))
    affinities[np.arange(len(labels)), labels] = 1.0
    affinities[groups[1], best] = 0.0
    affinities[groups[1], -1] = 1.0
    return EmState(candidates, affinities, state.line_weights, state.iteration)


def merge_close(state: EmState, merge_angle: float) -> EmState:
    """Merge candidate pairs closer than merge_angle, keeping the higher-support member."""
    candidates = list(state.candidates)
    affinities = state.affinities.copy()
    while len(candidates) > 1:
        vps = np.array([c.v for c in candidates])
        dist = angular_distance(vps[:, None, :], vps[None, :, :])
        np.fill_diagonal(dist, np.inf)
        i, j = np.unravel_index(int(np.argmin(dist)), dist.shape)
        if dist[i, j] >= merge_angle:
            break
        keep, drop = (i, j) if (candidates[i].support, -i) >= (candidates[j].support, -j) else (j, i)
        a, b = candidates[keep], candidates[drop]
        wa, wb = (a.support, b.support) if a.support + b.support > 0 else (1, 1)
        vb = b.v if np.dot(a.v, b.v) >= 0 else -b.v
        merged = wa * a.v + wb * vb
        candidates[keep] = VpCandidate(
            merged, support=a.support + b.support, prior_weight=max(a.prior_weight, b.prior_weight)
        )
        affinities[:, keep] += affinities[:, drop]
        del candidates[drop]
        affinities = np.delete(affinities, drop, axis=1)
    return EmState(candidates, affinities, state.line_weights, state.iteration)


def split_merge(state: EmState, segments: np.ndarray, cfg: EmConfig, bound: float = 1.0) -> EmState:
    segments = as_segment_array(segments)
    lines = lines_from_segments(segments)
    state = _split(state, segments, lines, bound)
    return merge_close(state, cfg.merge_angle)


# Inlier refits
# ------------------------

def annealed_sigma(cfg: EmConfig, iteration: int) -> float:
    """Likelihood width at a 1-based iteration, shrinking geometrically to sigma_em_min."""
    floor = min(cfg.sigma_em_min, cfg.sigma_em)
    return max(cfg.sigma_em * cfg.sigma_decay ** (iteration - 1), floor)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    kept = labels >= 0
    out[np.flatnonzero(kept), labels[kept]] = 1.0
    return out


def refit_inliers(
    segments: np.ndarray,
    lines: np.ndarray,
    candidates: List[VpCandidate],
    line_weights: np.ndarray,
    cfg: EmConfig,
) -> Tuple[List[VpCandidate], np.ndarray]:
    """
    Refit every candidate from the segments it explains best.

    A segment belongs to the candidate with the smallest d2, if that d2 is at
    most sigma_em. Members beyond max(inlier_scale * median member d2,
    min_inlier_d2) are dropped, and the rest are fitted with weights
    line_weight * length^2. Returns the candidates, with their inlier counts
    as support, and the label of every segment (-1 when rejected).
    """
    d2 = consistency_d2_matrix(segments, np.array([c.v for c in candidates]))
    nearest = np.argmin(d2, axis=1)
    own = d2[np.arange(len(segments)), nearest]
    lengths = np.hypot(segments[:, 2] - segments[:, 0], segments[:, 3] - segments[:, 1])
    fit_weights = line_weights * lengths ** 2
    labels = np.full(len(segments), -1)
    refitted = []
    for k, cand in enumerate(candidates):
        members = np.flatnonzero((nearest == k) & (own <= cfg.sigma_em))
        if len(members) == 0:
            refitted.append(VpCandidate(cand.v, support=0, prior_weight=cand.prior_weight))
            continue
        gate = max(cfg.inlier_scale * float(np.median(own[members])), cfg.min_inlier_d2)
        inliers = members[own[members] <= gate]
        labels[inliers] = k
        v = cand.v
        if len(inliers) >= 2:
            try:
                v = fit_vanishing_point(lines[inliers], fit_weights[inliers])
            except DegenerateCandidate:
                logger.debug(f"Candidate {k} has a degenerate inlier set; keeping its position")
        refitted.append(VpCandidate(v, support=len(inliers), prior_weight=cand.prior_weight))
    return refitted, labels


def refine_candidates(
    segments: np.ndarray,
    lines: np.ndarray,
    candidates: List[VpCandidate],
    line_weights: np.ndarray,
    cfg: EmConfig,
) -> List[VpCandidate]:
    """
    Alternate inlier refits and merges for up to refit_rounds rounds, stopping
    once nothing merges and no candidate moves by tol. A merge is always
    followed by a refit of the merged candidate.
    """
    merged = False
    for _ in range(cfg.refit_rounds):
        previous = np.array([c.v for c in candidates])
        candidates, labels = refit_inliers(segments, lines, candidates, line_weights, cfg)
        moved = float(np.max(angular_distance(previous, np.array([c.v for c in candidates]))))
        state = merge_close(EmState(candidates, _one_hot(labels, len(candidates)), line_weights), cfg.merge_angle)
        merged = len(state.candidates) != len(candidates)
        candidates = state.candidates
        if not merged and moved < cfg.tol:
            break
    if merged:
        candidates, _ = refit_inliers(segments, lines, candidates, line_weights, cfg)
    return candidates


# Driver
# ------------------------

def _with_support(candidates: List[VpCandidate], affinities: np.ndarray) -> List[VpCandidate]:
    labels = np.argmax(affinities, axis=1)
    counts = np.bincount(labels, minlength=len(candidates))
    return [VpCandidate(c.v, support=int(n), prior_weight=c.prior_weight) for c, n in zip(candidates, counts)]


def _finalize(candidates: List[VpCandidate], affinities: np.ndarray, iterations: int) -> EmResult:
    candidates = _with_support(candidates, affinities)
    order = [k for k in sorted(range(len(candidates)), key=lambda k: -candidates[k].support) if candidates[k].support > 0]
    kept = affinities[:, order]
    kept = kept / kept.sum(axis=1, keepdims=True)
    return EmResult(
        candidates=[candidates[k] for k in order],
        affinities=kept,
        labels=np.argmax(kept, axis=1),
        iterations=iterations,
    )


def run_em(segments, grid: BinGrid, cfg: EmConfig) -> EmResult:
    """
    Soft EM with a likelihood width that anneals from sigma_em to
    sigma_em_min, split-and-merge every f_s iterations, then inlier refits.
    Convergence is only declared once the width has stopped shrinking.
    """
    segments = as_segment_array(segments)
    if len(segments) < 2:
        raise TooFewSegments(f"EM refinement needs at least 2 segments, got {len(segments)}")
    lines = lines_from_segments(segments)
    candidates = init_candidates(grid, cfg.k_init, cfg.theta_act)
    prior = prior_from_grid(grid, cfg.sigma_prior) if cfg.use_prior else None
    if cfg.lambda_mix == 0 and cfg.eps_weight == 1:
        sim = np.eye(len(segments))
    else:
        sim = similarity_matrix(segments, cfg)

    iterations = 0
    sigma = cfg.sigma_em
    for iterations in range(1, cfg.max_iters + 1):
        sigma = annealed_sigma(cfg, iterations)
        affinities, weights = e_step(segments, lines, candidates, prior, cfg, sim=sim, sigma=sigma)
        previous = np.array([c.v for c in candidates])
        updated = m_step(lines, affinities, weights, previous=previous)
        movement = float(np.max(angular_distance(previous, updated)))
        candidates = [VpCandidate(v, prior_weight=c.prior_weight) for v, c in zip(updated, candidates)]
        if cfg.f_s and iterations % cfg.f_s == 0:
            state = EmState(_with_support(candidates, affinities), affinities, weights, iterations)
            state = split_merge(state, segments, cfg)
            if len(state.candidates) != len(candidates):
                movement = math.inf
            candidates = state.candidates
        if movement < cfg.tol and annealed_sigma(cfg, iterations + 1) == sigma:
            break

    if cfg.refit_rounds:
        candidates = refine_candidates(segments, lines, candidates, weights, cfg)
    affinities, weights = e_step(segments, lines, candidates, prior, cfg, sim=sim, sigma=sigma)
    if cfg.f_s:
        state = merge_close(EmState(_with_support(candidates, affinities), affinities, weights, iterations), cfg.merge_angle)
        candidates, affinities = state.candidates, state.affinities
    result = _finalize(candidates, affinities, iterations)
    logger.debug(f"EM finished after {iterations} iterations with {len(result.candidates)} vanishing points")
    return result
