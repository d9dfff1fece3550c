from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from foliscope_app.current_field import (
    AtlasMeasure,
    CurrentBuilder,
    CurrentField,
    GridMeasure,
    SampleCloudCurrent,
)
from foliscope_app.errors import ChartUndefined, GridMismatch
from foliscope_app.foliation_model import FoliationModel
from foliscope_app.surface_atlas import ChartWindow, SurfacePoint


@pytest.mark.parametrize("r", [0.1, 0.25, 0.5])
def test_line_disc_has_lelong_indicator_one(r: float) -> None:
    a = np.array([0.1 + 0.05j, -0.2 + 0.1j])
    disc = CurrentBuilder.line_disc(a, [1.0, 0.5 + 0.5j], 1.0)

    assert CurrentField.lelong_indicator(disc, SurfacePoint.pinned(a, 0), r) == pytest.approx(1.0, abs=1e-9)


def test_omega_cloud_has_unit_mass_in_every_chart(rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.omega_cloud(500, rng)

    assert cloud.mass() == pytest.approx(1.0, rel=1e-10)
    assert cloud.in_chart(1).mass() == pytest.approx(1.0, rel=1e-8)


def test_projective_line_has_unit_mass(rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.projective_line([1.0, -1.0, 0.5j], 400, rng)

    assert cloud.mass() == pytest.approx(1.0, rel=1e-10)
    assert cloud.normalize().normalized


def test_lelong_profile_of_omega_grows_with_radius(rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.omega_cloud(20000, rng).in_chart(0)

    values, sigmas = CurrentField.lelong_profile(cloud, SurfacePoint.pinned([0.1, -0.2j], 0), [0.2, 0.4, 0.8])

    assert np.all(np.diff(values) >= -3.0 * (sigmas[1:] + sigmas[:-1]))
    assert values[0] < 0.2


def test_directedness_of_leaf_samples() -> None:
    F = FoliationModel.linear(1 + 1j)
    pts = np.array([[0.3, 0.4j], [-0.1 + 0.2j, 0.5]], dtype=complex)
    dirs = F.eval_affine(pts, 0)
    cloud = SampleCloudCurrent(0, pts, [1.0, 2.0], dirs, local=True)

    assert cloud.directedness_residual(F) <= 1e-14
    transverse = SampleCloudCurrent(0, pts, [1.0, 2.0], np.conj(dirs[:, ::-1]), local=True)
    assert transverse.directedness_residual(F) > 0.1


def test_local_cloud_stays_in_its_chart() -> None:
    disc = CurrentBuilder.line_disc([0.0, 0.0], [1.0, 0.0], 0.5)

    with pytest.raises(ChartUndefined):
        disc.in_chart(2)


def test_cloud_rejects_nonpositive_weights() -> None:
    with pytest.raises(ValueError):
        SampleCloudCurrent(0, [[0.0, 0.0]], [0.0], [[1.0, 0.0]])


def test_to_grid_bins_mass_inside_window(rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.omega_cloud(2000, rng)
    window = ChartWindow.unit(0)

    grid = cloud.to_grid(window, 16)

    assert 0.0 < grid.total() < cloud.mass()
    assert grid.masses.shape == (16, 16)


def test_grid_total_equals_in_window_mass(rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.omega_cloud(5000, rng)
    window = ChartWindow(0, (0.2, -0.1), 0.7)

    grid = cloud.to_grid(window, 32)

    assert grid.total() == cloud.restrict(window).mass()
    assert float(np.sum(grid.masses)) == pytest.approx(grid.total(), rel=1e-12)
    assert grid.scaled(2.0).total() == 2.0 * grid.total()
    assert grid.normalized().total() == 1.0


def test_grid_l1_distance_and_layout_checks() -> None:
    window = ChartWindow.unit(0)
    g1 = GridMeasure(window, 2, np.array([[1.0, 0.0], [0.0, 1.0]]))
    g2 = GridMeasure(window, 2, np.array([[0.0, 2.0], [0.0, 2.0]]))

    assert GridMeasure.l1_distance(g1, g2) == pytest.approx(1.0)
    assert GridMeasure.l1_distance(g1, g1.scaled(3.0)) == pytest.approx(0.0)
    with pytest.raises(GridMismatch):
        GridMeasure.l1_distance(g1, GridMeasure.empty(window, 4))
    with pytest.raises(GridMismatch):
        GridMeasure(window, 3, np.zeros((2, 2)))


def test_atlas_measures_normalize_jointly() -> None:
    grids = [GridMeasure(ChartWindow.unit(k), 2, np.full((2, 2), float(k + 1))) for k in range(3)]

    normed = AtlasMeasure.normalized(grids)

    assert AtlasMeasure.total(normed) == pytest.approx(1.0)
    assert normed[2].total() == pytest.approx(0.5)
    assert AtlasMeasure.l1_distance(grids, AtlasMeasure.mean([grids, grids])) == pytest.approx(0.0)


def test_cloud_csv_round_trip(tmp_path: Path, rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.omega_cloud(50, rng)

    loaded = CurrentBuilder.load_csv(CurrentBuilder.save_csv(cloud, tmp_path / "omega.csv"))

    assert len(loaded) == len(cloud)
    assert loaded.mass() == pytest.approx(cloud.mass(), rel=1e-12)
