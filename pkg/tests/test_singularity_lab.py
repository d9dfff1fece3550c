from __future__ import annotations

import numpy as np
import pytest

from foliscope_app.errors import BranchViolation, ConfigError, QuadratureFailure, TailBoundFailure
from foliscope_app.singularity_lab import HalfLine, HarmonicWeight, SectorAnalysis, SectorModel


@pytest.mark.parametrize("eta, gamma", [(1j, 2.0), (-1 + 1j, 4.0), (1 + 1j, 4.0 / 3.0)])
def test_sector_exponent(eta: complex, gamma: float) -> None:
    assert SectorModel(eta).gamma == pytest.approx(gamma)


def test_eta_must_lie_in_upper_half_plane() -> None:
    with pytest.raises(ConfigError):
        SectorModel(1.0 - 0.5j)


def test_leaf_point_closed_form() -> None:
    model = SectorModel(1j)

    assert model.leaf_point(1.0, 0.0) == (pytest.approx(1.0), pytest.approx(1.0))
    x1, x2 = model.leaf_point(1.0, 2.0j)
    assert x1 == pytest.approx(np.exp(-2.0j))
    assert x2 == pytest.approx(np.exp(-2.0))
    with pytest.raises(ValueError):
        model.leaf_point(0.0, 1.0)


def test_leaf_moduli_are_read_off_sector_coordinates(sector_model: SectorModel, rng: np.random.Generator) -> None:
    p, q = rng.uniform(0.0, 5.0, 20), rng.uniform(0.0, 5.0, 20)
    zeta = sector_model.from_sector_coords(p, q)

    x1, x2 = sector_model.leaf_point(np.exp(0.7j), zeta)

    assert np.allclose(np.abs(x1), np.exp(-sector_model.b * q))
    assert np.allclose(np.abs(x2), np.exp(-p))
    assert np.all(sector_model.contains(zeta))


def test_distinguished_lines_meet_at_zeta_s(sector_model: SectorModel) -> None:
    s = 3.5
    zeta_s = sector_model.zeta_s(s)

    assert abs(sector_model.line_residual(1, s, zeta_s)) <= 1e-12
    assert abs(sector_model.line_residual(2, s, zeta_s)) <= 1e-12
    assert abs(sector_model.q_residual(zeta_s)) <= 1e-12
    for branch in (1, 2):
        head, tail = sector_model.lambda_split(branch, s)
        assert head.end == pytest.approx(zeta_s)
        assert tail.start == pytest.approx(zeta_s)
        far = sector_model.lambda_line(branch, s).point(np.array([0.0, 1.0, 10.0]))
        assert np.allclose(sector_model.line_residual(branch, s, far), 0.0, atol=1e-12)
        assert np.all(sector_model.contains(far, closed=True, tol=1e-12))


def test_flipped_leaves_are_tangent(sector_model: SectorModel, rng: np.random.Generator) -> None:
    flipped = sector_model.flipped()
    w = flipped.from_sector_coords(rng.uniform(0.1, 3.0, 50), rng.uniform(0.1, 3.0, 50))
    y1, y2 = flipped.leaf_point(0.8 * np.exp(0.3j), w)
    d1, d2 = flipped.leaf_direction(y1, y2)

    x1, x2 = sector_model.flip_point(y1, y2)
    residual = sector_model.tangency_residual(x1, x2, np.conj(d2), np.conj(d1))

    assert float(np.max(residual)) <= 1e-9


def test_phi_maps_sector_onto_half_plane(sector_model: SectorModel) -> None:
    edge = np.exp(1j * sector_model.angle) * np.array([0.5, 2.0])
    interior = np.exp(0.5j * sector_model.angle) * np.array([0.5, 2.0])

    assert np.allclose(sector_model.phi(np.array([1.0, 3.0])).imag, 0.0)
    assert np.all(sector_model.phi(edge).real < 0.0)
    assert np.allclose(sector_model.phi_inv(sector_model.phi(interior)), interior)
    with pytest.raises(BranchViolation):
        sector_model.phi(np.array([-1.0 - 1.0j]))
    with pytest.raises(BranchViolation):
        sector_model.phi_inv(np.array([1.0 - 1.0j]))


def test_constant_boundary_data_gives_constant_function() -> None:
    H = HarmonicWeight.constant(1.0)

    assert np.allclose(H.value(np.array([0.3 + 2j, -4 + 0.1j, 7.0])), 1.0, atol=1e-12)


def test_dirac_mass_at_origin_evaluates_to_poisson_kernel() -> None:
    H = HarmonicWeight(atom_t=[0.0], atom_m=[np.pi], atom_sigma=[0.0])

    assert H.value(np.array([1j]))[0] == pytest.approx(1.0)
    assert H.value(np.array([2j]))[0] == pytest.approx(0.5)
    assert H.sup_bound() == np.inf


def test_piecewise_density_matches_quadrature() -> None:
    H = HarmonicWeight(knots=[-1.0, 0.0, 2.0], density=[0.0, 1.0, 0.5])
    w = 0.3 + 0.7j
    t = np.linspace(-1.0, 2.0, 200001)
    kernel = w.imag / (np.pi * ((t - w.real) ** 2 + w.imag ** 2))

    expected = np.trapezoid(H.boundary_density(t) * kernel, t)

    assert H.value(np.array([w]))[0] == pytest.approx(expected, rel=1e-8)
    assert H.value(np.array([0.0 + 0.0j]))[0] == pytest.approx(1.0)


@pytest.mark.parametrize("kwargs", [
    {},
    {"atom_t": [0.0], "atom_m": [-1.0]},
    {"atom_t": [0.0, 1.0], "atom_m": [1.0]},
    {"knots": [1.0, 0.0], "density": [1.0, 1.0]},
    {"baseline": -1.0},
])
def test_invalid_boundary_data(kwargs) -> None:
    with pytest.raises(ConfigError):
        HarmonicWeight(**kwargs)


def test_mean_value_property(sector_model: SectorModel) -> None:
    H = HarmonicWeight.default_family(sector_model)

    for w in (2j, 1 + 3j, -2 + 2.5j):
        assert H.mean_value_residual(w, 0.5 * w.imag) <= 1e-10


def test_default_family_integrability_target(sector_model: SectorModel) -> None:
    H = HarmonicWeight.default_family(sector_model, target=2.0)

    weights = np.abs(H.atom_t) ** (-1.0 + 1.0 / sector_model.gamma)
    assert float(np.sum(H.atom_m * weights)) == pytest.approx(2.0)
    assert np.isfinite(H.integrability(sector_model.gamma))
    assert HarmonicWeight.constant().integrability(sector_model.gamma) == np.inf


def test_default_family_has_eight_equal_atoms(sector_model: SectorModel) -> None:
    H = HarmonicWeight.default_family(sector_model)

    assert H.atom_t.size == 8
    assert np.allclose(H.atom_m, H.atom_m[0])
    assert np.allclose(H.atom_sigma, 0.25)
    assert np.isfinite(H.sup_bound())


def test_harnack_constant_bounds_random_pairs(rng: np.random.Generator) -> None:
    bound = HarmonicWeight.harnack_constant()
    H = HarmonicWeight.default_family(SectorModel(1 + 1j))

    base = rng.uniform(-20.0, 20.0, 10_000) + 1j * rng.uniform(2.0, 30.0, 10_000)
    other = base + rng.uniform(0.0, 1.0, 10_000) * np.exp(1j * rng.uniform(0.0, np.pi, 10_000))
    ratios = H.value(base) / H.value(other)

    assert float(np.max(np.maximum(ratios, 1.0 / ratios))) <= bound * (1.0 + 1e-9)
    assert bound > 1.0


def test_kernel_ratio_needs_interior_points() -> None:
    with pytest.raises(BranchViolation):
        HarmonicWeight.kernel_ratio_bound(1.0 + 0j, 1j)


@pytest.mark.parametrize("f, s, expected", [
    (lambda t: 3.0, 5.0, 3.0),
    (lambda t: t, 4.0, 2.0),
    (lambda t: np.log(t), 2.0, np.log(2.0) - 1.0),
])
def test_expectation_oracles(f, s: float, expected: float) -> None:
    assert SectorAnalysis.expectation(f, s) == pytest.approx(expected, rel=1e-8)


def test_expectation_rejects_nonpositive_horizon() -> None:
    with pytest.raises(ValueError):
        SectorAnalysis.expectation(lambda t: 1.0, 0.0)


def test_expectation_reports_divergence() -> None:
    with pytest.raises(QuadratureFailure):
        SectorAnalysis.expectation(lambda t: 1.0 / t ** 1.5, 1.0)


def test_cesaro_curve_matches_exact_means() -> None:
    s = np.linspace(0.5, 10.0, 400)

    curve = SectorAnalysis.cesaro_curve(s, np.full(s.size, 2.0))

    assert np.allclose(curve, 2.0)
    with pytest.raises(ValueError):
        SectorAnalysis.cesaro_curve(np.array([1.0, 0.5]), np.array([1.0, 1.0]))


def test_ray_integral_is_linear_in_the_weight(sector_model: SectorModel) -> None:
    H = HarmonicWeight.default_family(sector_model)
    G = HarmonicWeight(atom_t=[1.0], atom_m=[0.5], atom_sigma=[0.1])
    direction = SectorAnalysis.interior_directions(sector_model, 3)[1]

    single = SectorAnalysis.ray_integral(sector_model, H, direction)
    double = SectorAnalysis.ray_integral(sector_model, H.scaled(2.0), direction)

    assert double.value == pytest.approx(2.0 * single.value, rel=1e-8)
    assert single.tail <= 0.1 * single.value
    assert SectorAnalysis.ray_integral(sector_model, G, direction).value > 0.0


def test_ray_outside_sector_is_a_branch_violation(sector_model: SectorModel) -> None:
    with pytest.raises(BranchViolation):
        SectorAnalysis.ray_integral(sector_model, HarmonicWeight.default_family(sector_model), -1j)


def test_constant_weight_has_no_certified_tail(square_model: SectorModel) -> None:
    with pytest.raises(TailBoundFailure):
        SectorAnalysis.ray_integral(square_model, HarmonicWeight.constant(), np.exp(0.25j * np.pi))


def test_axe_sum_is_a_tail_of_the_line_integral(square_model: SectorModel) -> None:
    H = HarmonicWeight.default_family(square_model)
    s = 4.0

    whole = SectorAnalysis.g_integral(square_model, H, 1, s)
    part = SectorAnalysis.axe_sum(square_model, H, s, hbar=0.5)

    assert 0.0 < part.value <= whole.value + whole.tail


def test_half_line_distance_clips_to_segment() -> None:
    segment = HalfLine(0j, 1.0 + 0j, 2.0)

    assert segment.distance(np.array([1.0 + 1.0j]))[0] == pytest.approx(1.0)
    assert segment.distance(np.array([3.0 + 0j]))[0] == pytest.approx(1.0)
    assert segment.distance(np.array([-1.0 + 0j]))[0] == pytest.approx(1.0)
    assert segment.end == pytest.approx(2.0)
