import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from spherevp.errors import DegenerateSegment, Indeterminate, NearPolarLine
from spherevp.geometry import (
    HomLine,
    ImageFrame,
    Segment,
    SphereCoord,
    angles_to_vectors,
    angular_distance,
    clip_segments,
    consistency_d1,
    consistency_d2,
    consistency_d2_matrix,
    image_point,
    line_elevation,
    lines_from_segments,
    normalize_transform,
    point_to_sphere,
    segment_to_line,
    sphere_to_point,
    to_normalized,
    to_pixels,
)

coords = st.floats(min_value=-50, max_value=50, allow_nan=False, allow_infinity=False)


def test_normalization_maps_corners_and_centre():
    frame = ImageFrame(640, 480)
    pts = to_normalized(np.array([[0.0, 0.0], [640.0, 480.0], [320.0, 240.0]]), frame)
    np.testing.assert_allclose(pts, [[-1.0, -0.75], [1.0, 0.75], [0.0, 0.0]], atol=1e-12)


def test_normalize_transform_uses_longer_side():
    H = normalize_transform(ImageFrame(300, 600))
    np.testing.assert_allclose(H, [[1 / 300, 0.0, -0.5], [0.0, 1 / 300, -1.0], [0.0, 0.0, 1.0]], atol=1e-15)


def test_normalization_round_trip(rng):
    frame = ImageFrame(1024, 768)
    pts = rng.uniform(0, 1024, size=(50, 2))
    np.testing.assert_allclose(to_pixels(to_normalized(pts, frame), frame), pts, atol=1e-9)


def test_point_to_sphere_examples():
    c = point_to_sphere([0, 0, 1])
    assert (c.alpha, c.beta) == (0.0, 0.0)
    c = point_to_sphere([1, 0, 1])
    assert c.alpha == pytest.approx(math.pi / 4)
    assert c.beta == pytest.approx(0.0)
    c = point_to_sphere([0, 1, 0])
    assert (c.alpha, c.beta) == (0.0, pytest.approx(math.pi / 2))
    # the lower pole folds onto the upper one
    assert point_to_sphere([0, -1, 0]) == point_to_sphere([0, 1, 0])


def test_antipodal_points_share_coordinates():
    a = point_to_sphere([-1, 0, -1])
    b = point_to_sphere([1, 0, 1])
    assert a == b


@settings(max_examples=200)
@given(coords, coords, coords)
def test_sphere_round_trip_preserves_direction(x, y, z):
    v = np.array([x, y, z])
    assume(np.linalg.norm(v) > 1e-3)
    back = sphere_to_point(point_to_sphere(v))
    assert angular_distance(v, back) < 1e-7


def test_sphere_coord_rejects_out_of_range():
    with pytest.raises(ValueError):
        SphereCoord(2.0, 0.0)


def test_sphere_coord_keeps_azimuth_at_the_pole():
    c = SphereCoord(-math.pi / 2, -math.pi / 2)
    assert (c.alpha, c.beta) == (-math.pi / 2, -math.pi / 2)


def test_segment_to_line_is_canonical():
    line = segment_to_line(Segment((0.0, 0.0), (1.0, 0.0)))
    np.testing.assert_allclose(line.vec, [0.0, 1.0, 0.0])


def test_zero_length_segment():
    with pytest.raises(DegenerateSegment):
        Segment((0.3, 0.3), (0.3, 0.3))


def test_lines_contain_their_endpoints(rng):
    segs = rng.uniform(-1, 1, size=(30, 4))
    lines = lines_from_segments(segs)
    ones = np.ones(len(segs))
    for pts in (np.column_stack([segs[:, 0], segs[:, 1], ones]), np.column_stack([segs[:, 2], segs[:, 3], ones])):
        assert np.max(np.abs(np.sum(lines * pts, axis=1))) < 1e-12
    np.testing.assert_allclose(np.linalg.norm(lines, axis=1), 1.0)


def test_elevation_curve_of_horizontal_line():
    line = HomLine.from_vector([0, 1, 0])
    for alpha in (-1.2, 0.0, 0.7):
        assert line_elevation(line, alpha) == pytest.approx(0.0)


def test_elevation_curve_near_pole():
    with pytest.raises(NearPolarLine):
        line_elevation(HomLine.from_vector([1, 0, 0]), 0.3)


def test_elevation_curve_lies_on_great_circle(rng):
    for _ in range(100):
        line = HomLine.from_vector(rng.normal(size=3))
        if abs(line.l2) < 0.05:
            continue
        alpha = rng.uniform(-math.pi / 2, math.pi / 2)
        v = angles_to_vectors(np.array([alpha, line_elevation(line, alpha)]))
        assert abs(np.dot(line.vec, v)) < 1e-9


def test_d2_examples():
    seg = Segment((-0.1, 0.0), (0.1, 0.0))
    assert consistency_d2(seg, [1, 0, 0]) == pytest.approx(0.0, abs=1e-12)
    assert consistency_d2(seg, [0, 1, 0]) == pytest.approx(1.0)
    assert consistency_d2(seg, [0.5, 0.5, 1.0]) == pytest.approx(1 - math.cos(math.pi / 4))


def test_d2_coincident_vp():
    seg = Segment((-0.1, 0.0), (0.1, 0.0))
    with pytest.raises(Indeterminate):
        consistency_d2(seg, [0, 0, 1])
    d = consistency_d2_matrix(np.array([seg.row]), np.array([[0.0, 0.0, 1.0]]))
    assert d[0, 0] == 0.0


def test_d2_sign_invariant(rng):
    segs = rng.uniform(-1, 1, size=(20, 4))
    vps = rng.normal(size=(5, 3))
    np.testing.assert_allclose(consistency_d2_matrix(segs, vps), consistency_d2_matrix(segs, -3.0 * vps), atol=1e-12)


def test_clip_segments():
    clipped, keep = clip_segments(np.array([[-2.0, 0.0, 2.0, 0.0], [2.0, 2.0, 3.0, 3.0], [0.1, 0.1, 0.2, 0.3]]))
    assert keep.tolist() == [True, False, True]
    np.testing.assert_allclose(clipped[0], [-1.0, 0.0, 1.0, 0.0])
    np.testing.assert_allclose(clipped[2], [0.1, 0.1, 0.2, 0.3])


def test_angular_distance_is_undirected():
    v = np.array([0.3, -0.4, 0.8])
    assert angular_distance(v, -v) == pytest.approx(0.0, abs=1e-12)
    assert angular_distance([1, 0, 0], [0, 0, 1]) == pytest.approx(math.pi / 2)


def test_image_point():
    assert image_point(np.array([1.0, 0.0, 0.0])) is None
    assert image_point(np.array([2.0, 4.0, 2.0])) == (1.0, 2.0)


def test_d1_vanishes_on_incident_points():
    line = segment_to_line(Segment((0.0, 0.0), (1.0, 1.0)))
    assert consistency_d1(line, np.array([2.0, 2.0, 1.0]) / 3.0) == pytest.approx(0.0, abs=1e-12)
    assert abs(consistency_d1(line, [0.0, 1.0, 0.0])) == pytest.approx(math.sqrt(0.5))
