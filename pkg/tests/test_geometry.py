import numpy as np
import pytest
import shapely

from plansafe.geometry import (
    PolylineIndex,
    ReferenceLine,
    box_corners,
    box_distance,
    from_frame,
    polygon_signed_distance,
    project_to_polyline,
    to_frame,
    wrap_angle,
)


def test_wrap_angle_range():
    th = np.linspace(-20, 20, 401)
    w = wrap_angle(th)
    assert np.all(w >= -np.pi) and np.all(w < np.pi)
    assert np.allclose(np.cos(w), np.cos(th)) and np.allclose(np.sin(w), np.sin(th))


def test_frame_round_trip():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(20, 2)) * 10
    q = to_frame(p, np.array([3.0, -2.0]), 0.7)
    assert np.allclose(from_frame(q, np.array([3.0, -2.0]), 0.7), p)


def test_box_distance_matches_shapely():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = box_corners(*rng.uniform(-5, 5, 2), rng.uniform(-4, 4), 2.3, 1.0)
        b = box_corners(*rng.uniform(-5, 5, 2), rng.uniform(-4, 4), 0.4, 0.4)
        ref = shapely.Polygon(a).distance(shapely.Polygon(b))
        assert box_distance(a, b) == pytest.approx(ref, abs=1e-9)


def test_polyline_index_matches_brute_force():
    rng = np.random.default_rng(2)
    t = np.linspace(0, 3 * np.pi, 80)
    poly = np.column_stack([10 * t, 15 * np.sin(t)])
    idx = PolylineIndex(poly)
    pts = rng.uniform([-20, -40], [120, 40], size=(500, 2))
    s, lat, dist, seg = idx.project(pts)
    s2, lat2, dist2, seg2 = project_to_polyline(pts, poly)
    assert np.allclose(dist, dist2, atol=1e-9)
    assert np.allclose(s, s2, atol=1e-6)
    assert np.allclose(lat, lat2, atol=1e-9)


def test_closed_ring_signed_distance_matches_polygon():
    square = np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 5.0], [0.0, 5.0]])
    pts = np.array([[5.0, 2.5], [11.0, 2.5], [5.0, -1.0], [1.0, 1.0]])
    sd = polygon_signed_distance(pts, square)
    assert np.allclose(sd, [2.5, -1.0, -1.0, 1.0])


def test_reference_line_projection_straight():
    ref = ReferenceLine(np.array([[0.0, 0.0], [50.0, 0.0], [100.0, 0.0]]))
    s, lat, dist = ref.project(np.array([[20.0, 1.5], [70.0, -2.0]]))
    assert np.allclose(s, [20, 70]) and np.allclose(lat, [1.5, -2.0]) and np.allclose(dist, [1.5, 2.0])
    assert np.allclose(ref.heading_at(np.array([10.0, 90.0])), 0.0)
