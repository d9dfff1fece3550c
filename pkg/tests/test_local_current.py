from __future__ import annotations

import numpy as np
import pytest

from foliscope_app.errors import AtomDetected
from foliscope_app.foliation_model import FoliationModel
from foliscope_app.local_current import LocalCurrentBuilder
from foliscope_app.singularity_lab import HarmonicWeight, SectorModel


def test_synthesized_parameters_fill_the_annulus(sector_model: SectorModel) -> None:
    alphas, weights = LocalCurrentBuilder.synthesize_mu(sector_model, 64, seed=4)

    moduli = np.abs(alphas)
    assert np.all(moduli > np.exp(-2.0 * np.pi * sector_model.b) - 1e-12)
    assert np.all(moduli <= 1.0 + 1e-12)
    assert weights.sum() == pytest.approx(1.0)


def test_synthesized_parameters_are_seed_deterministic(square_model: SectorModel) -> None:
    first, _ = LocalCurrentBuilder.synthesize_mu(square_model, 16, seed=2)
    second, _ = LocalCurrentBuilder.synthesize_mu(square_model, 16, seed=2)

    assert np.array_equal(first, second)


def test_single_leaf_current_has_unit_mass(square_model: SectorModel) -> None:
    current = LocalCurrentBuilder.assemble_local_current(
        square_model, [0.8 * np.exp(0.5j)], weights=lambda alpha: HarmonicWeight.constant(),
        samples_per_alpha=4096, seed=1, check_atoms=False)

    assert current.alpha_masses() == pytest.approx([1.0], rel=1e-10)
    assert current.cloud.mass() == pytest.approx(1.0, rel=1e-10)
    assert np.all(np.abs(current.cloud.points) <= 1.0 + 1e-12)


def test_local_current_is_directed_by_the_linear_model(sector_model: SectorModel) -> None:
    alphas, mu = LocalCurrentBuilder.synthesize_mu(sector_model, 32, seed=8)

    current = LocalCurrentBuilder.assemble_local_current(sector_model, alphas, mu, samples_per_alpha=256, seed=5)

    assert current.cloud.directedness_residual(FoliationModel.linear(sector_model.eta)) <= 1e-8
    assert np.allclose(current.alpha_masses(), 1.0)
    assert len(current.alpha_cloud(0)) > 0


@pytest.mark.parametrize("alphas, weights", [
    ([0.5, 0.5, 0.3j], None),
    (np.exp(1j * np.arange(10.0)), None),
    (np.exp(1j * np.arange(40.0)), np.r_[np.full(39, 0.01), 1.0]),
])
def test_atoms_in_the_parameter_measure_are_refused(square_model: SectorModel, alphas, weights) -> None:
    with pytest.raises(AtomDetected):
        LocalCurrentBuilder.assemble_local_current(square_model, alphas, weights, samples_per_alpha=16)


def test_theta_slice_decay_reports_each_level(square_model: SectorModel) -> None:
    alphas, _ = LocalCurrentBuilder.synthesize_mu(square_model, 8, seed=0)
    thetas = np.array([[0.95, 0.95]], dtype=complex)

    curve = LocalCurrentBuilder.theta_slice_decay(square_model, [1.0], alphas, thetas, pair_count=2, ds=0.5)

    assert len(curve) == 1
    s, value = curve[0]
    assert s == 1.0
    assert value >= 0.0
