import math

import numpy as np
import pytest

from spherevp.errors import EmptyInput, IndexOutOfRange
from spherevp.geometry import SphereCoord, canonical_line, point_to_sphere
from spherevp.sphere_raster import (
    BinGrid,
    SphereImage,
    accumulator_predict,
    bin_center,
    index_to_angle,
    local_maxima,
    render_sphere_image,
    vp_to_bin,
)


def test_vp_to_bin_examples():
    assert vp_to_bin(SphereCoord(0.0, 0.0), 20) == 210
    assert vp_to_bin(SphereCoord(-math.pi / 2, -math.pi / 2), 20) == 0
    assert vp_to_bin(SphereCoord(math.pi / 2 - 1e-9, 0.0), 20) == 219
    # poles keep their azimuth, so the corner bins stay reachable
    assert vp_to_bin(SphereCoord(math.pi / 2, math.pi / 2), 20) == 399
    assert vp_to_bin(SphereCoord(-math.pi / 2, math.pi / 2), 20) == 380


def test_bin_center_examples():
    c = bin_center(210, 20)
    assert c.alpha == pytest.approx(math.pi / 40)
    assert c.beta == pytest.approx(math.pi / 40)
    with pytest.raises(IndexOutOfRange):
        bin_center(400, 20)


@pytest.mark.parametrize("n", [4, 20, 32])
def test_bin_centre_round_trip(n):
    for b in range(n * n):
        assert vp_to_bin(bin_center(b, n), n) == b


def test_render_empty():
    image = render_sphere_image([], 64)
    assert image.intensities.shape == (64, 64)
    assert image.intensities.sum() == 0


def test_render_horizontal_line_is_the_equator():
    image = render_sphere_image(np.array([[0.0, 1.0, 0.0]]), 128).intensities
    assert np.all(image[64] == 1.0)
    assert image.sum() == 128


def test_render_vertical_line_is_a_meridian():
    image = render_sphere_image(np.array([[1.0, 0.0, 0.0]]), 128).intensities
    assert np.all(image[:, 64] == 1.0)
    assert image.sum() == 128


def test_render_rejects_tiny_resolution():
    with pytest.raises(ValueError):
        render_sphere_image([], 8)


def test_rendered_curves_are_connected_and_close(rng):
    s = 128
    pixel = math.pi / s
    centres = index_to_angle(np.arange(s), s)
    for _ in range(20):
        line = canonical_line(rng.normal(size=3))
        if abs(line[1]) < 0.1:
            continue
        image = render_sphere_image(line[None, :], s).intensities
        # every column is hit by a steep enough curve
        assert np.all(image.max(axis=0) == 1.0)
        rows, cols = np.nonzero(image)
        beta, alpha = centres[rows], centres[cols]
        v = np.column_stack([np.sin(alpha) * np.cos(beta), np.sin(beta), np.cos(alpha) * np.cos(beta)])
        assert np.max(np.abs(v @ line)) <= math.sin(1.5 * pixel)


@pytest.mark.parametrize("l2", [0.0, 1e-8, 1e-3, 0.05, -0.09])
def test_near_polar_curves_cover_every_row(rng, l2):
    s = 128
    pixel = math.pi / s
    centres = index_to_angle(np.arange(s), s)
    for _ in range(5):
        a = rng.uniform(0.0, 2 * math.pi)
        r = math.sqrt(1.0 - l2 * l2)
        line = np.array([r * math.cos(a), l2, r * math.sin(a)])
        image = render_sphere_image(line[None, :], s).intensities
        # dense samples of the circle's front half give its elevation extent
        e1 = np.cross(line, [0.0, 1.0, 0.0] if abs(l2) < 0.5 else [1.0, 0.0, 0.0])
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(line, e1)
        t = np.linspace(0.0, 2 * math.pi, 20001)[:, None]
        points = np.cos(t) * e1 + np.sin(t) * e2
        beta = np.arcsin(np.clip(points[points[:, 2] >= 0, 1], -1.0, 1.0))
        crossed = (centres > beta.min() + pixel) & (centres < beta.max() - pixel)
        assert crossed.any()
        assert np.all(image[crossed].max(axis=1) == 1.0)
        rows, cols = np.nonzero(image)
        b, al = centres[rows], centres[cols]
        v = np.column_stack([np.sin(al) * np.cos(b), np.sin(b), np.cos(al) * np.cos(b)])
        assert np.max(np.abs(v @ line)) <= math.sin(1.5 * pixel)


def test_save_pgm(tmp_path):
    path = tmp_path / "sphere.pgm"
    SphereImage(np.eye(16)).save_pgm(path)
    assert path.read_bytes().startswith(b"P5")


def test_bin_grid_validation(tmp_path):
    with pytest.raises(ValueError):
        BinGrid(2, [0.0, 0.5, 1.5, 0.0])
    with pytest.raises(ValueError):
        BinGrid(2, [0.0, 0.5])
    grid = BinGrid(3, np.linspace(0, 1, 9))
    grid.to_csv(tmp_path / "grid.csv")
    np.testing.assert_allclose(np.loadtxt(tmp_path / "grid.csv", delimiter=","), grid.image)


def _lines_through(point, angles_deg):
    p = np.array([point[0], point[1], 1.0])
    rows = []
    for a in np.radians(angles_deg):
        q = p + np.array([math.cos(a), math.sin(a), 0.0])
        rows.append(np.cross(p, q))
    return canonical_line(np.array(rows))


def test_accumulator_peaks_at_concurrency_point():
    grid = accumulator_predict(_lines_through((0.05, 0.05), [0, 60, 120]), 20, supersample=5)
    assert int(np.argmax(grid.values)) == 210
    # the nearest lattice sample lies about one degree from the point
    assert grid.values.max() > 0.75


def test_accumulator_lines_through_the_origin():
    lines = _lines_through((0.0, 0.0), [0, 60, 120])
    grid = accumulator_predict(lines, 20, supersample=5)
    # the origin is the lower corner of bin 210 only
    assert vp_to_bin(point_to_sphere([0.0, 0.0, 1.0]), 20) == 210
    assert int(np.argmax(grid.values)) == 210
    assert grid.values[210] == 1.0
    assert np.sum(grid.values == grid.values.max()) == 1


def test_accumulator_single_horizontal_line():
    grid = accumulator_predict(np.array([[0.0, 1.0, 0.0]]), 21)
    np.testing.assert_allclose(grid.image[10], 1.0)


def test_accumulator_equator_row_ties_go_to_the_lowest_bin():
    grid = accumulator_predict(np.array([[0.0, 1.0, 0.0]]), 20, supersample=5)
    np.testing.assert_allclose(grid.image[10], 1.0)
    assert int(np.argmax(grid.values)) == 200
    assert local_maxima(grid, 3) == [200, 201, 202]


def test_accumulator_is_order_and_sign_invariant(rng):
    lines = canonical_line(rng.normal(size=(10, 3)))
    perm = rng.permutation(10)
    signs = rng.choice([-1.0, 1.0], size=(10, 1))
    a = accumulator_predict(lines, 20, supersample=3)
    b = accumulator_predict(signs * lines[perm], 20, supersample=3)
    np.testing.assert_allclose(a.values, b.values, atol=1e-12)


def test_accumulator_matches_brute_force(rng):
    lines = canonical_line(rng.normal(size=(50, 3)))
    n, ss, sigma = 10, 4, 0.02
    grid = accumulator_predict(lines, n, sigma_acc=sigma, supersample=ss)
    fine = n * ss
    best = np.zeros((n, n))
    # samples start at each bin's lower corner
    for r in range(fine):
        beta = r / fine * math.pi - math.pi / 2
        for c in range(fine):
            alpha = c / fine * math.pi - math.pi / 2
            v = np.array([math.sin(alpha) * math.cos(beta), math.sin(beta), math.cos(alpha) * math.cos(beta)])
            vote = np.mean(np.exp(-((lines @ v) ** 2) / (2 * sigma ** 2)))
            best[r // ss, c // ss] = max(best[r // ss, c // ss], vote)
    np.testing.assert_allclose(grid.image, best, atol=1e-12)
    assert int(np.argmax(grid.values)) == int(np.argmax(best))


def test_accumulator_empty():
    with pytest.raises(EmptyInput):
        accumulator_predict(np.zeros((0, 3)), 20)


def test_local_maxima_examples():
    values = np.zeros(400)
    assert local_maxima(BinGrid(20, values), 25) == []
    values[210] = 0.8
    assert local_maxima(BinGrid(20, values), 25) == [210]
    values[:] = 0
    values[5] = values[300] = 0.5
    assert local_maxima(BinGrid(20, values), 25) == [5, 300]


def test_local_maxima_keeps_strongest_first():
    values = np.zeros(400)
    peaks = [r * 20 + c for r in range(0, 20, 2) for c in range(0, 20, 2)][:30]
    strengths = np.linspace(0.9, 0.3, len(peaks))
    values[peaks] = strengths
    found = local_maxima(BinGrid(20, values), 25)
    assert found == peaks[:25]
    assert np.all(np.diff(values[found]) < 0)


def test_local_maxima_respects_threshold():
    values = np.zeros(400)
    values[42] = 0.04
    assert local_maxima(BinGrid(20, values), 5, theta_act=0.05) == []


def test_point_in_bin_of_its_sphere_coordinate():
    c = point_to_sphere([0.05, 0.05, 1.0])
    assert vp_to_bin(c, 20) == 210
