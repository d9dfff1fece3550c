from __future__ import annotations

import numpy as np
import pytest

from foliscope_app.current_field import CurrentBuilder
from foliscope_app.density_lab import DensityLab, DiagonalFrame, YoungOperator
from foliscope_app.errors import AtomDetected, ConfigError, FrameMismatch
from foliscope_app.surface_atlas import ChartWindow


def _transverse_discs():
    first = CurrentBuilder.line_disc([0.0, 0.0], [1.0, 0.0], 0.5, n_radial=200, n_angular=8)
    second = CurrentBuilder.line_disc([0.0, 0.0], [0.0, 1.0], 0.5, n_radial=200, n_angular=8)
    return first, second


def _independent_omega_clouds(n: int, seed: int):
    s1, s2 = np.random.SeedSequence(seed).spawn(2)
    return (CurrentBuilder.omega_cloud(n, np.random.default_rng(s1)),
            CurrentBuilder.omega_cloud(n, np.random.default_rng(s2)))


@pytest.fixture
def local_frame() -> DiagonalFrame:
    return DiagonalFrame(0, ChartWindow.unit(0), partition=True)


def test_transverse_lines_meet_with_unit_density(local_frame: DiagonalFrame) -> None:
    T1, T2 = _transverse_discs()

    product = DensityLab.tensor_dilate(T1, T2, 4.0, local_frame)

    assert product.theta == pytest.approx(1.0, rel=0.03)
    assert product.pairs > 0


def test_dilation_rescaling_is_a_change_of_variables() -> None:
    T1, T2 = _independent_omega_clouds(400, 5)
    frame = DiagonalFrame.covering()[0]

    big = DensityLab.tensor_dilate(T1, T2, 4.0, frame, rho=1.0, resolution=8)
    small = DensityLab.tensor_dilate(T1, T2, 2.0, frame, rho=0.5, resolution=8)

    assert big.pairs == small.pairs
    assert big.raw == small.raw
    assert np.allclose(big.grid.masses, 2.0 ** 4 * small.grid.masses)


def test_pair_budget_thins_without_biasing(local_frame: DiagonalFrame) -> None:
    T1, T2 = _transverse_discs()

    full = DensityLab.tensor_dilate(T1, T2, 4.0, local_frame)
    thinned = DensityLab.tensor_dilate(T1, T2, 4.0, local_frame, pair_budget=100_000,
                                       rng=np.random.default_rng(1))

    assert thinned.pairs < full.pairs
    assert thinned.theta == pytest.approx(full.theta, rel=0.15)


def test_dilation_factor_below_one_is_rejected(local_frame: DiagonalFrame) -> None:
    T1, T2 = _transverse_discs()

    with pytest.raises(ValueError):
        DensityLab.tensor_dilate(T1, T2, 0.5, local_frame)


def test_local_and_global_clouds_do_not_pair(local_frame: DiagonalFrame, rng: np.random.Generator) -> None:
    disc, _ = _transverse_discs()

    with pytest.raises(FrameMismatch):
        DensityLab.tensor_dilate(disc, CurrentBuilder.omega_cloud(50, rng), 2.0, local_frame)


def test_self_product_of_one_cloud_is_an_atom(rng: np.random.Generator) -> None:
    cloud = CurrentBuilder.omega_cloud(200, rng)

    with pytest.raises(AtomDetected):
        DensityLab.density_mass_estimate(cloud, cloud, [2.0, 4.0])


@pytest.mark.parametrize("schedule", [[], [4.0, 2.0], [0.5, 2.0]])
def test_bad_lambda_schedules(schedule) -> None:
    T1, T2 = _transverse_discs()

    with pytest.raises(ConfigError):
        DensityLab.density_mass_estimate(T1, T2, schedule)


def test_frame_theta_grid_lies_in_theta_region() -> None:
    frame = DiagonalFrame(0, ChartWindow.unit(0), epsilon0=0.1)

    grid = frame.theta_grid(3)

    assert grid.shape == (9, 2)
    assert np.all(frame.theta_contains(grid))
    with pytest.raises(FrameMismatch):
        DiagonalFrame(1, ChartWindow.unit(0))


def test_extrapolation_recovers_intercept() -> None:
    lambdas = np.array([2.0, 4.0, 8.0, 16.0])
    theta = 0.75 + 0.5 / lambdas

    limit, _ = DensityLab.extrapolate(lambdas, theta, np.full(4, 1e-3))

    assert limit == pytest.approx(0.75, abs=1e-10)


def test_mixed_components_fade_under_dilation() -> None:
    T1, T2 = _independent_omega_clouds(3000, 9)

    coarse = DensityLab.mixed_mass_ratio(T1, T2, 2.0)
    fine = DensityLab.mixed_mass_ratio(T1, T2, 8.0)

    assert fine < coarse


@pytest.mark.slow
def test_omega_self_intersection_has_unit_mass() -> None:
    T1, T2 = _independent_omega_clouds(20000, 2024)

    estimate = DensityLab.density_mass_estimate(T1, T2, [2.0, 4.0, 8.0], seed=3)

    assert estimate.limit == pytest.approx(1.0, abs=5.0 * estimate.limit_error + 0.1)


def test_young_constants_in_closed_form() -> None:
    assert YoungOperator("inverse_square", resolution=16).young_constant() == pytest.approx(2.0)
    assert YoungOperator("inverse_square", resolution=16, delta=0.5).young_constant() == \
        pytest.approx(4.0 ** (2.0 / 3.0))
    assert YoungOperator("convolution_r", resolution=16, r=0.2).young_constant() == pytest.approx(1.0)


@pytest.mark.parametrize("r", [0.05, 0.1, 0.2])
def test_convolution_of_one_is_the_ball_volume_ratio(r: float) -> None:
    op = YoungOperator("convolution_r", resolution=128, r=r)

    pf = op.apply(np.ones(128))

    interior = op.radii < 1.0 - r - op.h
    assert pf[interior] == pytest.approx(np.full(np.count_nonzero(interior), 0.5 * np.pi ** 2), rel=0.02)


def test_inverse_square_potential_of_one() -> None:
    op = YoungOperator("inverse_square", resolution=64)

    pf = op.apply(np.ones(64))

    # spherical means of |x - y|^-2 in real dimension four are 1 / max(|x|, |y|)^2
    assert pf == pytest.approx(np.pi ** 2 * (1.0 - 0.5 * op.radii ** 2), rel=1e-3)


def test_radial_weight_matches_the_plain_indicator() -> None:
    plain = YoungOperator("convolution_r", resolution=32, r=0.3)
    weighted = YoungOperator("convolution_r", resolution=32, r=0.3, g=lambda d: np.ones_like(d))

    assert weighted.apply(np.ones(32)) == pytest.approx(plain.apply(np.ones(32)), rel=1e-8)


def test_convolution_norm_is_bounded_by_kernel_mass(rng: np.random.Generator) -> None:
    op = YoungOperator("convolution_r", resolution=64, r=0.2)

    norm = op.norm_estimate(rng, trials=5, power_iterations=10)

    assert 0.25 * np.pi ** 2 <= norm <= 0.5 * 1.05 * np.pi ** 2
    assert norm <= op.operator_norm() * (1.0 + 1e-9)
    assert not np.any(op.apply(np.zeros(64)))


def test_convolution_norm_is_stable_in_r_and_resolution() -> None:
    norms = {(n, r): YoungOperator("convolution_r", resolution=n, r=r).operator_norm()
             for n in (128, 256) for r in (0.05, 0.5)}

    for r in (0.05, 0.5):
        assert norms[(256, r)] == pytest.approx(norms[(128, r)], rel=0.1)
    assert max(norms.values()) <= 2.0 * min(norms.values())


@pytest.mark.parametrize("kwargs", [
    {"kernel": "gaussian"},
    {"kernel": "inverse_square", "delta": 1.0},
    {"kernel": "convolution_r", "delta": 0.2},
])
def test_young_operator_rejects_bad_parameters(kwargs) -> None:
    with pytest.raises(ConfigError):
        YoungOperator(resolution=8, **kwargs)
