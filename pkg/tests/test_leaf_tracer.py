from __future__ import annotations

import numpy as np
import pytest

from foliscope_app.current_field import GridMeasure
from foliscope_app.errors import SingularApproach
from foliscope_app.experiments import ExperimentRunner
from foliscope_app.foliation_model import FoliationModel
from foliscope_app.leaf_tracer import LeafTracer, _Layout, crowded_sites
from foliscope_app.surface_atlas import ChartWindow, SurfacePoint


@pytest.mark.parametrize("eta", [1j, -1 + 2j, 0.5 + 0.5j])
def test_linear_leaf_endpoint_matches_closed_form(eta: complex) -> None:
    F = FoliationModel.linear(eta)

    leaf = LeafTracer.integrate_leaf(F, SurfacePoint.pinned([1.0, 1.0], 0), [0, 1j])

    x1, x2 = leaf.endpoint.affine
    assert x1 == pytest.approx(np.exp(-eta), abs=1e-8)
    assert x2 == pytest.approx(np.exp(-1.0), abs=1e-8)
    assert leaf.max_defect <= 1e-6


def test_leaf_path_is_polyline_in_complex_time() -> None:
    F = FoliationModel.linear(1j)

    leaf = LeafTracer.integrate_leaf(F, SurfacePoint.pinned([0.5, 0.5], 0), [0, 1, 1 + 1j, 1j])

    assert len(leaf.points) == 4
    x1, x2 = leaf.endpoint.affine
    assert x1 == pytest.approx(0.5 * np.exp(-1j), abs=1e-8)
    assert x2 == pytest.approx(0.5 * np.exp(-1.0), abs=1e-8)


def test_leaf_from_singularity_is_refused() -> None:
    with pytest.raises(SingularApproach):
        LeafTracer.integrate_leaf(FoliationModel.linear(1j), SurfacePoint.pinned([0.0, 0.0], 0), [0, 1])


def test_jouanolou_leaf_changes_chart_consistently() -> None:
    F = FoliationModel.jouanolou(2)
    x0 = SurfacePoint.from_affine([0.3 + 0.2j, -0.4 + 0.1j], 0)

    there = LeafTracer.integrate_leaf(F, x0, [0, 0.4 + 0.3j])
    back = LeafTracer.integrate_leaf(F, there.endpoint, [0, -0.4 - 0.3j])

    assert np.allclose(back.endpoint.to_chart(0), x0.affine, atol=1e-7)


def test_brownian_walk_on_horizontal_lines_stays_on_its_line() -> None:
    F = FoliationModel.constant()
    window = ChartWindow(0, (0j, 0j), 1.0)

    report = LeafTracer.brownian_average(F, SurfacePoint.pinned([0.0, 0.0], 0), n_steps=2000, dt=1e-3,
                                         seed=7, resolution=16, window=window, walkers=4, metric="flow")

    assert report.total_mass() == pytest.approx(1.0)
    columns = report.grid.masses.sum(axis=0)
    assert np.count_nonzero(columns) == 1
    assert report.samples == 2000
    assert report.extras["metric"] == "flow"


def test_brownian_average_is_seed_deterministic() -> None:
    F = FoliationModel.linear(1j)
    x0 = SurfacePoint.pinned([0.4, 0.3j], 0)
    kwargs = dict(n_steps=600, dt=1e-3, seed=3, resolution=8, walkers=3)

    first = LeafTracer.brownian_average(F, x0, **kwargs)
    second = LeafTracer.brownian_average(F, x0, **kwargs)

    assert np.array_equal(first.grid.masses, second.grid.masses)


def test_brownian_rejects_unknown_metric() -> None:
    with pytest.raises(ValueError):
        LeafTracer.brownian_average(FoliationModel.constant(), SurfacePoint.pinned([0.0, 0.0], 0),
                                    10, 1e-3, 0, metric="hyperbolic")


def test_nevanlinna_average_normalizes_and_reports_characteristic() -> None:
    F = FoliationModel.linear(1j)
    x0 = SurfacePoint.pinned([0.5, 0.5], 0)

    report = LeafTracer.nevanlinna_average(F, x0, r=0.5, n_samples=3000, seed=11, resolution=8)

    assert report.scheme == "nevanlinna"
    assert report.total_mass() == pytest.approx(1.0)
    assert report.characteristic > 0.0
    assert 0.0 < report.window_fraction <= 1.0 + 1e-12


def test_nevanlinna_index_must_lie_in_unit_interval() -> None:
    with pytest.raises(ValueError):
        LeafTracer.nevanlinna_average(FoliationModel.linear(1j), SurfacePoint.pinned([0.5, 0.5], 0),
                                      r=1.0, n_samples=10, seed=0)


def test_brownian_walk_reflects_at_the_window_edge() -> None:
    F = FoliationModel.constant()
    window = ChartWindow(0, (0j, 0j), 1.0)

    report = LeafTracer.brownian_average(F, SurfacePoint.pinned([0.0, 0.0], 0), n_steps=2000, dt=1e-2,
                                         seed=5, resolution=8, window=window, walkers=4, metric="flow")

    assert report.window_fraction == pytest.approx(1.0)
    assert report.extras["reflected"] > 0
    rows = report.grid.masses.sum(axis=1)
    assert rows[0] > 0.0 and rows[-1] > 0.0


def test_reflected_increment_points_back_inside() -> None:
    F = FoliationModel.constant()
    layout = _Layout.build(F, ChartWindow(0, (0j, 0j), 1.0), 8)
    x = np.array([[0.95 + 0j, 0j]])

    # the leaf moves x1 by i*xi, so xi = -0.2i pushes Re x1 outward
    xi = layout.reflect(F, x, np.array([0]), np.array([-0.2j]))

    assert xi[0] == pytest.approx(0.2j)
    assert abs(x[0, 0] + 1j * xi[0]) < 1.0


@pytest.mark.parametrize("attempts, hits, crowded", [
    ([20], [19], [0]),
    ([20], [18], []),
    ([5], [5], []),
    ([0, 40, 30], [0, 37, 10], [1]),
])
def test_site_aborts_only_above_ninety_percent(attempts, hits, crowded) -> None:
    assert crowded_sites(np.array(attempts), np.array(hits)).tolist() == crowded


def test_site_keys_follow_the_grid() -> None:
    layout = _Layout.build(FoliationModel.linear(1j), ChartWindow(0, (0j, 0j), 1.0), 4)
    x = np.array([[-0.9 + 0j, -0.9 + 0j], [0.9 + 0j, 0.1 + 0j], [2.0 + 0j, 0j]])

    keys = layout.sites(x, np.zeros(3, dtype=int))

    assert keys.tolist() == [0, 3 * 4 + 2, layout.site_count - 1]


@pytest.mark.slow
def test_constant_field_walk_fills_its_disc_uniformly() -> None:
    F = FoliationModel.constant()
    radius = 0.5
    window = ChartWindow(0, (0j, 0j), radius)

    report = LeafTracer.brownian_average(F, SurfacePoint.pinned([0.0, 0.0], 0), n_steps=10 ** 6, dt=4e-3,
                                         seed=21, resolution=4, window=window, walkers=16, metric="flow")

    # Re x1 marginal of the uniform law on the disc |x1| < radius
    u = np.linspace(-1.0, 1.0, 5)
    cdf = (u * np.sqrt(1.0 - u ** 2) + np.arcsin(u)) / np.pi
    expected = np.diff(cdf)
    observed = report.grid.masses.sum(axis=1)
    assert np.sum(np.abs(observed - expected)) <= 0.05


def test_nevanlinna_error_shrinks_like_inverse_root_n() -> None:
    F = FoliationModel.linear(1j)
    x0 = SurfacePoint.pinned([0.5, 0.5], 0)

    small = LeafTracer.nevanlinna_average(F, x0, r=0.5, n_samples=2000, seed=4, resolution=8)
    large = LeafTracer.nevanlinna_average(F, x0, r=0.5, n_samples=20000, seed=4, resolution=8)

    for attr in ("statistical_error", "characteristic_error"):
        ratio = getattr(small, attr) / getattr(large, attr)
        assert np.sqrt(10.0) / 2.0 <= ratio <= 2.0 * np.sqrt(10.0)


@pytest.mark.parametrize("scheme", ["nevanlinna", "brownian"])
def test_averaging_clouds_are_directed_with_unit_mass(scheme: str) -> None:
    F = FoliationModel.linear(1 + 1j)
    x0 = SurfacePoint.pinned([0.4, 0.3 + 0.2j], 0)
    if scheme == "nevanlinna":
        report = LeafTracer.nevanlinna_average(F, x0, r=0.5, n_samples=2000, seed=2, resolution=8,
                                               cloud_every=1)
    else:
        report = LeafTracer.brownian_average(F, x0, n_steps=800, dt=1e-3, seed=2, resolution=8,
                                             walkers=4, cloud_every=10)

    cloud = report.cloud
    assert len(cloud) > 0
    assert cloud.directedness_residual(F) <= 1e-8
    assert cloud.mass() == pytest.approx(1.0)


def test_clouds_are_only_kept_on_request() -> None:
    F = FoliationModel.linear(1j)

    report = LeafTracer.nevanlinna_average(F, SurfacePoint.pinned([0.5, 0.5], 0), r=0.5, n_samples=500,
                                           seed=1, resolution=8)

    assert report.cloud is None


@pytest.mark.slow
def test_walk_in_a_flow_box_follows_its_plaque(rng: np.random.Generator) -> None:
    F = FoliationModel.linear(1j)
    center = 0.5 + 0j
    window = ChartWindow(0, (center, center), 0.1)

    report = LeafTracer.brownian_average(F, SurfacePoint.pinned([center, center], 0), n_steps=10 ** 6,
                                         dt=4e-4, seed=13, resolution=4, window=window, walkers=16,
                                         metric="flow")

    # the plaque through the centre is x1 = c exp(i log(x2 / c)); flow-time area is dA(x2) / |x2|^2
    x2 = center + 0.1 * np.sqrt(rng.random(2 * 10 ** 6)) * np.exp(2j * np.pi * rng.random(2 * 10 ** 6))
    x1 = center * np.exp(1j * np.log(x2 / center))
    on_plaque = np.column_stack([x1, x2])[np.abs(x1 - center) < 0.1]
    expected = GridMeasure.accumulate(window, 4, on_plaque, 1.0 / np.abs(on_plaque[:, 1]) ** 2)
    assert GridMeasure.l1_distance(report.grid, expected) <= 0.1


@pytest.mark.slow
@pytest.mark.parametrize("scheme", ["nevanlinna", "brownian"])
def test_averaging_outputs_have_no_mass_at_regular_points(scheme: str, rng: np.random.Generator) -> None:
    F = FoliationModel.jouanolou(2)
    x0 = SurfacePoint.from_affine([0.3 + 0.2j, -0.4 + 0.1j], 0)
    if scheme == "nevanlinna":
        report = LeafTracer.nevanlinna_average(F, x0, r=0.9, n_samples=20000, seed=8, resolution=16,
                                               cloud_every=1)
    else:
        report = LeafTracer.brownian_average(F, x0, n_steps=200_000, dt=1e-3, seed=8, resolution=16,
                                             walkers=64, cloud_every=10)

    assert ExperimentRunner._regular_lelong_drop(report.cloud, rng) <= 0.1


@pytest.mark.slow
def test_jouanolou_walks_from_several_starts_agree(rng: np.random.Generator) -> None:
    F = FoliationModel.jouanolou(2)
    starts = [SurfacePoint.from_homogeneous(rng.normal(size=3) + 1j * rng.normal(size=3)) for _ in range(5)]

    reports = [LeafTracer.brownian_average(F, x0, n_steps=10 ** 6, dt=1e-3, seed=30 + k, resolution=16,
                                           walkers=64)
               for k, x0 in enumerate(starts)]

    for i in range(len(reports)):
        for j in range(i + 1, len(reports)):
            bound = max(0.05, 3.0 * (reports[i].statistical_error + reports[j].statistical_error))
            assert reports[i].l1_distance(reports[j]) <= bound
