from __future__ import annotations

import numpy as np
import pytest

from foliscope_app.errors import ChartUndefined, ConfigError
from foliscope_app.surface_atlas import ChartWindow, SurfaceAtlas, SurfacePoint


def test_from_homogeneous_picks_max_modulus_chart() -> None:
    p = SurfacePoint.from_homogeneous([1.0, 2.0, 0.5])

    assert p.chart == 1
    assert p.affine == (pytest.approx(0.5), pytest.approx(0.25))
    assert p.is_best_chart()


def test_zero_homogeneous_vector_is_rejected() -> None:
    with pytest.raises(ChartUndefined):
        SurfacePoint.from_homogeneous([0.0, 0.0, 0.0])


def test_pinned_point_keeps_its_chart_far_from_origin() -> None:
    p = SurfacePoint.pinned([3.0 + 1j, -2.0], 0)

    assert p.chart == 0
    assert not p.is_best_chart()
    assert p.to_chart(0) == (pytest.approx(3.0 + 1j), pytest.approx(-2.0))


def test_json_round_trip_of_point_and_window() -> None:
    p = SurfacePoint.from_affine([0.3 - 0.2j, 0.1j], 2)
    assert SurfacePoint.from_json(p.to_json()).homogeneous == pytest.approx(p.homogeneous)

    w = ChartWindow(1, (0.1j, -0.2), 0.4, "ball")
    assert ChartWindow.from_json(w.to_json()) == w


def test_transition_jacobian_matches_closed_form() -> None:
    x, y = 0.7 + 0.2j, -0.3 + 0.5j
    moved, D = SurfaceAtlas.transition(np.array([[x, y]]), 0, 1)

    assert moved[0] == pytest.approx([1.0 / x, y / x])
    expected = np.array([[-1.0 / x ** 2, 0.0], [-y / x ** 2, 1.0 / x]])
    assert np.allclose(D[0], expected, atol=1e-14)


def test_project_undefined_where_dehomogenizing_coordinate_vanishes() -> None:
    with pytest.raises(ChartUndefined):
        SurfaceAtlas.project(np.array([[0.0, 1.0, 2.0]]), 0)


def test_rechart_moves_points_to_best_chart() -> None:
    points = np.array([[2.0, 0.5], [0.1, 0.2]], dtype=complex)
    moved, best = SurfaceAtlas.rechart(points, np.array([0, 0]))

    assert best.tolist() == [1, 0]
    assert np.all(np.abs(moved) <= 1.0)


def test_fubini_study_volume_is_one() -> None:
    assert SurfaceAtlas.total_mass() == pytest.approx(1.0, abs=1e-8)


def test_window_mass_is_chart_independent() -> None:
    window = ChartWindow(0, (0.5, 0.6j), 0.3)

    here = SurfaceAtlas.window_mass(window, 0)
    there = SurfaceAtlas.window_mass(window, 2)

    assert there == pytest.approx(here, rel=1e-10)


def test_omega_length_matches_fs_matrix(rng: np.random.Generator) -> None:
    pts = rng.normal(size=(5, 2)) + 1j * rng.normal(size=(5, 2))
    v = rng.normal(size=(5, 2)) + 1j * rng.normal(size=(5, 2))

    H = SurfaceAtlas.fs_matrix(pts)
    assert np.allclose(H, np.conj(np.transpose(H, (0, 2, 1))))
    assert np.all(SurfaceAtlas.omega_norm2(pts, v) > 0.0)


def test_fs_distance_vanishes_on_projective_rescaling() -> None:
    X = np.array([[1.0, 2.0j, -0.5]])

    assert SurfaceAtlas.fs_distance(X, (3.0 - 1j) * X)[0] == pytest.approx(0.0, abs=1e-7)
    assert SurfaceAtlas.fs_distance(np.array([[1.0, 0, 0]]), np.array([[0, 1.0, 0]]))[0] == pytest.approx(1.0)


def test_locate_marks_points_outside_window() -> None:
    window = ChartWindow(0, (0j, 0j), 1.0)
    pts = np.array([[0.0, 0.0], [0.999, -0.999], [1.0, 0.0], [0.5, 2.0]], dtype=complex)

    i, j = window.locate(pts, 4)

    assert (i[0], j[0]) == (2, 2)
    assert (i[1], j[1]) == (3, 0)
    assert i[2] == -1 and i[3] == -1


@pytest.mark.parametrize("kwargs", [
    {"chart": 0, "center": (0j, 0j), "radius": 0.0},
    {"chart": 3, "center": (0j, 0j), "radius": 1.0},
    {"chart": 0, "center": (0j, 0j), "radius": 1.0, "shape": "polydisc"},
])
def test_invalid_windows_are_rejected(kwargs) -> None:
    with pytest.raises(ConfigError):
        ChartWindow(**kwargs)


def test_fs_density_is_twice_the_metric_determinant() -> None:
    H0, vol0 = SurfaceAtlas.fs_density([0j, 0j])

    assert np.allclose(H0, np.eye(2) / np.pi)
    assert vol0 == pytest.approx(2.0 / np.pi ** 2)
    H, vol = SurfaceAtlas.fs_density([0.3 - 0.2j, 1.5j], k=1)
    assert vol == pytest.approx(2.0 * np.linalg.det(H).real)
