from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from foliscope_app.errors import ChartUndefined, ConfigError, TooCloseToSingularity
from foliscope_app.foliation_model import FoliationModel
from foliscope_app.surface_atlas import SurfacePoint


def test_linear_preset_parses_eta() -> None:
    F = FoliationModel.preset("linear:eta=-1+2i")

    assert F.is_local
    v = FoliationModel.eval_field(F, SurfacePoint.pinned([1.0, 1.0], 0))
    assert v == pytest.approx([-1 + 2j, 1.0])


@pytest.mark.parametrize("name", ["linear:eta=1", "linear:eta=2-1j", "spiral:3", "jouanolou:x"])
def test_bad_presets_raise_config_error(name: str) -> None:
    with pytest.raises(ConfigError):
        FoliationModel.preset(name)


def test_jouanolou_fields_agree_on_chart_overlaps(rng: np.random.Generator) -> None:
    F = FoliationModel.jouanolou(2)

    assert FoliationModel.chart_consistency(F, rng) <= 1e-10


def test_jouanolou_has_seven_hyperbolic_singularities() -> None:
    F = FoliationModel.jouanolou(2)

    sing = F.singularities
    assert len(sing) == 7
    assert all(s.hyperbolic for s in sing)
    for s in sing:
        assert np.linalg.norm(F.eval_affine(s.location.vector[None, :], s.location.chart)) <= 1e-8


def test_linear_model_singularity_eta() -> None:
    F = FoliationModel.linear(1 + 1j)

    (sing,) = F.singularities
    assert sing.location.affine == (pytest.approx(0), pytest.approx(0))
    assert sing.eta == pytest.approx(1 + 1j)


def test_linear_field_is_the_normal_form() -> None:
    F = FoliationModel.linear(1j)

    v = FoliationModel.eval_field(F, SurfacePoint.pinned([1.0, 1.0], 0))

    assert v == pytest.approx([1j, 1.0])


@pytest.mark.parametrize("eta", [1j, -1 + 1j, 1 + 1j])
def test_linear_singularity_eigenvalues_are_eta_and_one(eta: complex) -> None:
    (sing,) = FoliationModel.linear(eta).singularities

    lam1, lam2 = sing.eigenvalues
    assert lam1 == pytest.approx(eta)
    assert lam2 == pytest.approx(1.0)
    assert sing.hyperbolic


def test_local_model_rejects_other_charts() -> None:
    F = FoliationModel.linear(1j)

    with pytest.raises(ChartUndefined):
        FoliationModel.eval_field(F, SurfacePoint.pinned([0.1, 0.2], 1))


def test_load_chart_file_round_trip(tmp_path: Path) -> None:
    path = tmp_path / "linear.json"
    path.write_text(json.dumps({
        "name": "file-linear", "degree": 1,
        "charts": [{"vx": [[1, 0, 1.0, 2.0]], "vy": [[0, 1, 1.0, 0.0]]}],
    }), encoding="utf-8")

    F = FoliationModel.load(str(path))
    G = FoliationModel.linear(1 + 2j)
    pts = np.array([[0.3 + 0.1j, -0.2j], [0.5, 0.5]])

    assert F.name == "file-linear"
    assert np.allclose(F.eval_affine(pts, 0), G.eval_affine(pts, 0))


def test_load_rejects_inconsistent_charts(tmp_path: Path) -> None:
    path = tmp_path / "broken.json"
    chart = {"vx": [[0, 0, 1.0, 0.0]], "vy": [[0, 0, 0.0, 0.0]]}
    path.write_text(json.dumps({"degree": 1, "charts": [chart, chart, chart]}), encoding="utf-8")

    with pytest.raises(ConfigError):
        FoliationModel.load(str(path))


def test_flow_box_plaques_are_tangent() -> None:
    F = FoliationModel.jouanolou(2)
    p = SurfacePoint.from_affine([0.4 + 0.1j, -0.3 + 0.2j], 0)

    box = FoliationModel.regular_flow_box(F, p, 0.02)

    assert box.tangency_residual <= 1e-6
    assert box.kappa0 >= 1.0
    assert box.plaque_points(0).shape == (16, 2)


def test_flow_box_refuses_singular_centre() -> None:
    F = FoliationModel.linear(1j)

    with pytest.raises(TooCloseToSingularity):
        FoliationModel.regular_flow_box(F, SurfacePoint.pinned([0.01, 0.0], 0), 0.01)
