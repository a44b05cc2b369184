import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherevp.em_refine import VpCandidate
from spherevp.errors import (
    AntipodalDirection,
    CollinearTriplet,
    DegenerateFit,
    EmptyInput,
    ImaginaryFocal,
    NoValidTriplet,
    VerticalLine,
)
from spherevp.geometry import ImageFrame, angular_distance
from spherevp.horizon import (
    HorizonLine,
    Intrinsics,
    auc,
    cumulative_histogram,
    estimate_horizon,
    fit_horizon,
    focal_from_pair,
    horizon_endpoints,
    horizon_error,
    horizon_objective,
    intrinsics_from_triplet,
    line_through_pixels,
    rectify_homography,
    select_triplet,
    triplet_score,
)
from spherevp.synthgen import random_rotation, sample_manhattan_scene, scene_rng
from spherevp.types import HorizonConfig, SynthConfig

CFG = HorizonConfig()
FRAME = ImageFrame(640, 480)

errors_lists = st.lists(st.floats(min_value=0.0, max_value=1.0, allow_nan=False), min_size=1, max_size=30)


def _room(zenith=(0.0, 1.0, 0.01)):
    return [
        VpCandidate(np.array(zenith), support=30),
        VpCandidate([-1.0, 0.1, 1.0], support=10),
        VpCandidate([1.0, 0.1, 1.0], support=20),
    ]


# Triplets
# ------------------------

def test_triplet_score_examples():
    assert triplet_score(math.pi / 2, [10, 10, 10]) == pytest.approx(30.0)
    assert triplet_score(0.0, [100, 100, 100]) == 0.0
    assert triplet_score(math.pi / 3, [5, 5, 0]) == pytest.approx(5.0)


def test_select_triplet_prefers_room_over_extra_candidates():
    cands = _room() + [VpCandidate([0.3, -0.2, 1.0], support=3)]
    choice = select_triplet(cands, CFG)
    assert sorted(choice.triplet) == [0, 1, 2]
    assert choice.zenith == 0
    assert choice.score == pytest.approx(60.0)


def test_select_triplet_is_order_invariant():
    cands = _room() + [VpCandidate([0.3, -0.2, 1.0], support=3)]
    choice = select_triplet(cands, CFG)
    chosen = {tuple(np.round(cands[k].v, 12)) for k in choice.triplet}
    shuffled = [cands[k] for k in (3, 2, 0, 1)]
    again = select_triplet(shuffled, CFG)
    assert {tuple(np.round(shuffled[k].v, 12)) for k in again.triplet} == chosen


def test_select_triplet_needs_exactly_one_zenith():
    with pytest.raises(NoValidTriplet):
        select_triplet(_room()[1:] + [VpCandidate([0.3, -0.2, 1.0], support=3)], CFG)
    two_zeniths = [VpCandidate([0.0, 1.0, 0.01], support=5), VpCandidate([0.2, 1.0, 0.05], support=5), _room()[1]]
    with pytest.raises(NoValidTriplet):
        select_triplet(two_zeniths, CFG)


def test_select_triplet_rejects_steep_horizons():
    cands = [
        VpCandidate([0.0, 1.0, 0.01], support=30),
        VpCandidate([-1.0, -1.0, 1.0], support=10),
        VpCandidate([1.0, 1.0, 1.0], support=10),
    ]
    with pytest.raises(NoValidTriplet):
        select_triplet(cands, CFG)


# Fit
# ------------------------

def test_fit_with_zenith_at_infinity():
    cands = [
        VpCandidate([0.0, 1.0, 0.0], support=10),
        VpCandidate([-1.0, 0.1, 1.0], support=10),
        VpCandidate([1.0, 0.1, 1.0], support=10),
    ]
    h = fit_horizon((0, 1, 2), 0, cands, CFG)
    assert angular_distance(h.h, [0.0, 1.0, -0.1]) < 1e-12


def test_fit_is_exact_when_vps_lie_on_the_perpendicular():
    cands = [
        VpCandidate([0.1, 5.0, 1.0], support=40),
        VpCandidate([-2.0, 0.24, 1.0], support=7),
        VpCandidate([3.0, 0.14, 1.0], support=19),
    ]
    h = fit_horizon((0, 1, 2), 0, cands, CFG).h
    for p in ([-2.0, 0.24, 1.0], [3.0, 0.14, 1.0]):
        assert abs(np.dot(h, p)) < 1e-12


def test_fit_minimizes_weighted_residuals():
    points = [(-1.0, 0.1), (2.0, 0.3)]
    cands = [VpCandidate([0.0, 1.0, 0.0], support=10), VpCandidate([-1.0, 0.1, 1.0], support=10), VpCandidate([2.0, 0.3, 1.0], support=30)]
    h = fit_horizon((0, 1, 2), 0, cands, CFG).h
    weights = [10 / math.hypot(*points[0]), 30 / math.hypot(*points[1])]
    best = horizon_objective(h, points, weights)
    for delta in (-1e-3, 1e-3, -0.1, 0.1):
        assert horizon_objective(h + np.array([0.0, 0.0, delta]), points, weights) >= best


def test_fit_needs_a_finite_horizontal_vp():
    cands = [VpCandidate([0.0, 1.0, 0.01], support=10), VpCandidate([1.0, 0.0, 0.0], support=10), VpCandidate([1.0, 0.1, 0.0], support=10)]
    with pytest.raises(DegenerateFit):
        fit_horizon((0, 1, 2), 0, cands, CFG)


def test_estimate_horizon_falls_back_to_level_line():
    h, choice = estimate_horizon([VpCandidate([1.0, 0.0, 0.0], support=2)], CFG)
    assert choice is None
    np.testing.assert_allclose(h.h, [0.0, 1.0, 0.0])


def test_manhattan_camera_horizon_is_recovered():
    for seed in range(10):
        scene = sample_manhattan_scene(SynthConfig(noise_scale_range=(0.0, 0.0)), scene_rng(21, seed))
        cands = [VpCandidate(scene.camera.vanishing_point(axis), support=10) for axis in np.eye(3)]
        h, choice = estimate_horizon(cands, CFG)
        assert choice is not None and choice.zenith == 1
        assert angular_distance(h.h, scene.horizon) < 1e-6


# Metrics
# ------------------------

def test_horizon_error_examples():
    level = line_through_pixels((0, 240), (640, 240), FRAME)
    assert horizon_error(level, level, FRAME) == pytest.approx(0.0, abs=1e-12)
    lower = line_through_pixels((0, 288), (640, 288), FRAME)
    assert horizon_error(lower, level, FRAME) == pytest.approx(0.1)
    crossing = line_through_pixels((0, 336), (640, 192), FRAME)
    assert horizon_error(crossing, level, FRAME) == pytest.approx(0.2)
    assert horizon_error(level, crossing, FRAME) == pytest.approx(0.2)


def test_horizon_endpoints_follow_the_line():
    h = line_through_pixels((0, 100), (640, 300), FRAME)
    (x0, y0), (x1, y1) = horizon_endpoints(h, FRAME)
    assert (x0, x1) == (0.0, 640.0)
    assert y0 == pytest.approx(100.0)
    assert y1 == pytest.approx(300.0)


def test_vertical_horizon():
    with pytest.raises(VerticalLine):
        horizon_error(np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), FRAME)
    with pytest.raises(VerticalLine):
        HorizonLine(np.array([1.0, 0.0, 0.2])).y_at(0.0)


def test_auc_examples():
    assert auc([0.0]) == 1.0
    assert auc([0.25]) == 0.0
    assert auc([0.5, 0.0]) == pytest.approx(0.5)
    assert auc([0.125]) == pytest.approx(0.5)
    with pytest.raises(EmptyInput):
        auc([])


@given(errors_lists)
def test_auc_is_the_area_under_the_cumulative_curve(errors):
    max_err = 0.25
    clipped = np.clip(errors, 0.0, max_err)
    xs = np.unique(np.concatenate([[0.0, max_err], clipped]))
    area = 0.0
    for lo, hi in zip(xs[:-1], xs[1:]):
        area += np.mean(np.asarray(errors) <= lo) * (hi - lo)
    assert auc(errors, max_err) == pytest.approx(area / max_err, abs=1e-12)


@settings(max_examples=50)
@given(errors_lists, st.integers(min_value=0, max_value=29), st.floats(min_value=0.0, max_value=0.5))
def test_auc_never_rewards_larger_errors(errors, index, bump):
    worse = list(errors)
    worse[index % len(worse)] += bump
    assert auc(worse) <= auc(errors) + 1e-15


def test_cumulative_histogram():
    xs, fractions = cumulative_histogram([0.0, 0.1, 0.3, 0.2], max_err=0.25, samples=6)
    np.testing.assert_allclose(xs, [0.0, 0.05, 0.1, 0.15, 0.2, 0.25])
    np.testing.assert_allclose(fractions, [0.25, 0.25, 0.5, 0.5, 0.75, 0.75])
    assert np.all(np.diff(fractions) >= 0)


# Calibration
# ------------------------

def test_triplet_calibration_recovers_the_camera(rng):
    checked = 0
    while checked < 100:
        f = rng.uniform(0.5, 3.0)
        K = Intrinsics(f, *rng.uniform(-0.2, 0.2, size=2))
        vps = K.K @ random_rotation(rng)
        if np.min(np.abs(vps[2])) < 0.1 * np.min(np.linalg.norm(vps, axis=0)):
            continue
        points = [vps[:2, i] / vps[2, i] for i in range(3)]
        found = intrinsics_from_triplet(*points)
        assert found.f == pytest.approx(K.f, rel=1e-6)
        assert found.u0 == pytest.approx(K.u0, abs=1e-6)
        assert found.v0 == pytest.approx(K.v0, abs=1e-6)
        checked += 1


def test_triplet_calibration_errors():
    with pytest.raises(CollinearTriplet):
        intrinsics_from_triplet((0.0, 0.0), (1.0, 1.0), (2.0, 2.0))
    with pytest.raises(ImaginaryFocal):
        intrinsics_from_triplet((-1.0, 0.0), (1.0, 0.0), (0.0, 0.1))


def test_focal_from_pair():
    assert focal_from_pair((1.0, 0.0), (-1.0, 0.0)) == pytest.approx(1.0)
    assert focal_from_pair((2.0, 0.0), (-0.5, 0.0)) == pytest.approx(1.0)
    with pytest.raises(ImaginaryFocal):
        focal_from_pair((1.0, 0.0), (2.0, 0.0))


def test_intrinsics_in_pixels():
    pixel = Intrinsics(1.0, 0.0, 0.0).to_pixels(FRAME)
    assert pixel.f == pytest.approx(320.0)
    assert (pixel.u0, pixel.v0) == (pytest.approx(320.0), pytest.approx(240.0))


def test_rectify_examples():
    np.testing.assert_allclose(rectify_homography(Intrinsics(1.2), (0.0, 0.0), "z"), np.eye(3), atol=1e-9)
    H = rectify_homography(Intrinsics(1.0), (1.0, 0.0), "z")
    mapped = H @ np.array([1.0, 0.0, 1.0])
    assert abs(mapped[0] / mapped[2]) < 1e-9 and abs(mapped[1] / mapped[2]) < 1e-9


def test_rectify_is_a_rotation_in_disguise(rng):
    K = Intrinsics(1.4, 0.05, -0.1)
    for axis in ("x", "y", "z"):
        v = rng.uniform(-1, 1, size=2)
        H = rectify_homography(K, v, axis)
        R = np.linalg.inv(K.K) @ H @ K.K
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
        assert np.linalg.det(R) == pytest.approx(1.0)


def test_rectify_sends_pencil_to_infinity():
    K = Intrinsics(1.0)
    H = rectify_homography(K, (0.5, 0.2), "x")
    assert abs((H @ np.array([0.5, 0.2, 1.0]))[2]) < 1e-9


def test_rectify_antipodal_direction():
    K = Intrinsics(1.0)
    H = rectify_homography(K, np.array([-1.0, 0.0, 0.0]), "x")
    assert np.linalg.norm(np.cross(H @ np.array([-1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])) < 1e-9
    with pytest.raises(AntipodalDirection):
        rectify_homography(K, np.array([-1.0, 0.0, 0.0]), "x", strict=True)
