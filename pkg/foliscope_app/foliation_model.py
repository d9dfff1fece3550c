# foliscope_app/foliation_model.py

import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.integrate import solve_ivp

from .errors import ChartUndefined, ConfigError, SolverDiverged, TooCloseToSingularity
from .logger import AppLogger
from .surface_atlas import CHART_AXES, SurfaceAtlas, SurfacePoint

logger = AppLogger.get_logger(__name__)

HYPERBOLIC_RTOL = 1e-9
DEDUP_DISTANCE = 1e-8

Monomials = Dict[Tuple[int, int, int], complex]


@dataclass(eq=False)
class FoliationSpec:
    """Polynomial vector fields per chart; coefficient arrays C[i, j] multiply x^i y^j."""
    degree: int
    fields: Tuple[Tuple[np.ndarray, np.ndarray], ...]
    name: str = "custom"

    def __post_init__(self):
        if self.degree < 1 and not self.is_local:
            raise ConfigError(f"degree must be positive, got {self.degree}")
        if len(self.fields) not in (1, 3):
            raise ConfigError("a foliation needs one chart (local model) or three charts")

    @property
    def is_local(self) -> bool:
        return len(self.fields) == 1

    @property
    def charts(self) -> Tuple[int, ...]:
        return tuple(range(len(self.fields)))

    def eval_affine(self, points: np.ndarray, charts: Union[np.ndarray, int]) -> np.ndarray:
        points = np.atleast_2d(points)
        charts = np.broadcast_to(np.asarray(charts), (points.shape[0],))
        out = np.empty_like(points, dtype=complex)
        for k in np.unique(charts):
            k = int(k)
            if k >= len(self.fields):
                raise ChartUndefined(f"{self.name} has no field in chart {k}")
            m = charts == k
            vx, vy = self.fields[k]
            x, y = points[m, 0], points[m, 1]
            out[m, 0] = P.polyval2d(x, y, vx)
            out[m, 1] = P.polyval2d(x, y, vy)
        return out

    def jacobian_affine(self, points: np.ndarray, chart: int) -> np.ndarray:
        points = np.atleast_2d(points)
        vx, vy = self.fields[chart]
        x, y = points[:, 0], points[:, 1]
        J = np.empty((points.shape[0], 2, 2), dtype=complex)
        for row, C in enumerate((vx, vy)):
            J[:, row, 0] = P.polyval2d(x, y, P.polyder(C, axis=0))
            J[:, row, 1] = P.polyval2d(x, y, P.polyder(C, axis=1))
        return J

    @cached_property
    def singularities(self) -> List["Singularity"]:
        return FoliationModel.find_singularities(self)

    def singular_points(self, chart: int) -> np.ndarray:
        """Affine coordinates, in `chart`, of the singularities that chart can see."""
        pts = []
        for s in self.singularities:
            X = np.asarray(s.location.homogeneous)
            if self.is_local:
                pts.append(s.location.vector)
            elif abs(X[chart]) > 1e-12:
                pts.append(SurfaceAtlas.project(X[None, :], chart)[0])
        return np.array(pts, dtype=complex).reshape(-1, 2)


@dataclass(frozen=True)
class Singularity:
    """An isolated zero of the field with its eigenvalue data."""
    location: SurfacePoint
    eigenvalues: Tuple[complex, complex]
    eta: complex
    hyperbolic: bool

    def to_json(self) -> Dict:
        return {
            "location": self.location.to_json(),
            "eigenvalues": [[z.real, z.imag] for z in self.eigenvalues],
            "eta": [self.eta.real, self.eta.imag],
            "hyperbolic": self.hyperbolic,
        }


@dataclass
class FlowBox:
    """Straightening data: plaques x_o = phi_alpha(x_g) over a transversal disc."""
    chart: int
    center: SurfacePoint
    graph_axis: int
    transversal: np.ndarray
    nodes: np.ndarray
    plaques: np.ndarray
    kappa0: float
    tangency_residual: float

    def plaque_points(self, index: int) -> np.ndarray:
        pts = np.empty((self.nodes.size, 2), dtype=complex)
        pts[:, self.graph_axis] = self.center.vector[self.graph_axis] + self.nodes
        pts[:, 1 - self.graph_axis] = self.plaques[index]
        return pts


def _parse_complex(text: str) -> complex:
    try:
        return complex(text.replace(" ", "").replace("i", "j"))
    except ValueError as e:
        raise ConfigError(f"cannot parse complex number {text!r}") from e


def _coeff_array(terms: Sequence[Sequence[float]], size: int) -> np.ndarray:
    C = np.zeros((size, size), dtype=complex)
    for i, j, re_part, im_part in terms:
        C[int(i), int(j)] += complex(re_part, im_part)
    return C


class FoliationModel:
    """Construction, evaluation and local analysis of foliations."""

    PRESET_PATTERNS = {
        "linear": re.compile(r"^linear:eta=(?P<eta>[-+0-9.eEij ]+)$"),
        "jouanolou": re.compile(r"^jouanolou:(?P<degree>\d+)$"),
        "constant": re.compile(r"^constant$"),
    }

    @staticmethod
    def linear(eta: complex) -> FoliationSpec:
        """Local hyperbolic normal form eta*x1 d/dx1 + x2 d/dx2.

        Leaves are flowed by i*v in complex time, so they read x = (a e^{i eta t}, e^{i t}).
        """
        vx = np.zeros((2, 2), dtype=complex)
        vy = np.zeros((2, 2), dtype=complex)
        vx[1, 0] = eta
        vy[0, 1] = 1.0
        return FoliationSpec(1, ((vx, vy),), name=f"linear:eta={eta}")

    @staticmethod
    def constant() -> FoliationSpec:
        """The product foliation by horizontal lines, as a local model."""
        vx = np.zeros((1, 1), dtype=complex)
        vy = np.zeros((1, 1), dtype=complex)
        vx[0, 0] = 1.0
        return FoliationSpec(0, ((vx, vy),), name="constant")

    @staticmethod
    def from_homogeneous(components: Sequence[Monomials], name: str = "custom") -> FoliationSpec:
        """Foliation induced by a homogeneous field (F0, F1, F2) on C^3."""
        degrees = {sum(e) for comp in components for e in comp}
        if len(components) != 3 or len(degrees) != 1:
            raise ConfigError("homogeneous field needs three components of a common degree")
        d = degrees.pop()
        size = d + 2
        fields = []
        for k in range(3):
            a, b = CHART_AXES[k]
            Fk = np.zeros((size, size), dtype=complex)
            for e, c in components[k].items():
                Fk[e[a], e[b]] += c
            chart_field = []
            for axis, idx in ((0, a), (1, b)):
                Fi = np.zeros((size, size), dtype=complex)
                for e, c in components[idx].items():
                    Fi[e[a], e[b]] += c
                # d/dt (X_idx / X_k) at X_k = 1 is F_idx - x_idx F_k
                shifted = np.zeros_like(Fk)
                if axis == 0:
                    shifted[1:, :] = Fk[:-1, :]
                else:
                    shifted[:, 1:] = Fk[:, :-1]
                chart_field.append(Fi - shifted)
            fields.append(tuple(chart_field))
        return FoliationSpec(d, tuple(fields), name=name)

    @staticmethod
    def jouanolou(degree: int) -> FoliationSpec:
        """F = (X1^d, X2^d, X0^d): d^2+d+1 hyperbolic singularities."""
        components = [
            {(0, degree, 0): 1.0 + 0j},
            {(0, 0, degree): 1.0 + 0j},
            {(degree, 0, 0): 1.0 + 0j},
        ]
        return FoliationModel.from_homogeneous(components, name=f"jouanolou:{degree}")

    @staticmethod
    def preset(name: str) -> FoliationSpec:
        name = name.strip()
        for kind, pattern in FoliationModel.PRESET_PATTERNS.items():
            match = pattern.match(name)
            if not match:
                continue
            if kind == "linear":
                eta = _parse_complex(match["eta"])
                if eta.imag <= 0.0:
                    raise ConfigError(f"linear preset needs Im(eta) > 0, got {eta}")
                return FoliationModel.linear(eta)
            if kind == "jouanolou":
                return FoliationModel.jouanolou(int(match["degree"]))
            return FoliationModel.constant()
        raise ConfigError(f"unknown foliation preset {name!r}")

    @staticmethod
    def load(source: Union[str, Path, Dict]) -> FoliationSpec:
        """Preset name, JSON file path or already-parsed JSON object."""
        if isinstance(source, dict):
            data = source
        else:
            text = str(source)
            if not text.lower().endswith(".json"):
                return FoliationModel.preset(text)
            try:
                data = json.loads(Path(text).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read foliation file {text}: {e}") from e

        name = str(data.get("name", "custom"))
        if "homogeneous" in data:
            components = [{(int(e0), int(e1), int(e2)): complex(re_part, im_part)
                           for e0, e1, e2, re_part, im_part in comp} for comp in data["homogeneous"]]
            return FoliationModel.from_homogeneous(components, name=name)

        degree = int(data["degree"])
        charts = data["charts"]
        all_terms = [t for c in charts for key in ("vx", "vy") for t in c[key]]
        size = max([int(max(t[0], t[1])) for t in all_terms] + [degree + 1]) + 1
        fields = tuple((_coeff_array(c["vx"], size), _coeff_array(c["vy"], size)) for c in charts)
        spec = FoliationSpec(degree, fields, name=name)
        if not spec.is_local:
            residual = FoliationModel.chart_consistency(spec, np.random.default_rng(0))
            if residual > 1e-8:
                raise ConfigError(f"chart fields are not parallel on overlaps (residual {residual:.2e})")
        return spec

    @staticmethod
    def eval_field(F: FoliationSpec, p: SurfacePoint) -> np.ndarray:
        if F.is_local and p.chart != 0:
            raise ChartUndefined("local models are defined in chart 0 only")
        return F.eval_affine(p.vector[None, :], p.chart)[0]

    @staticmethod
    def chart_consistency(F: FoliationSpec, rng: np.random.Generator, n: int = 200) -> float:
        """Largest normalized cross product between v_j pushed to chart k and v_k."""
        X = rng.normal(size=(n, 3)) + 1j * rng.normal(size=(n, 3))
        worst = 0.0
        for k in range(3):
            for j in range(3):
                if j == k:
                    continue
                xk = SurfaceAtlas.project(X, k)
                xj, D = SurfaceAtlas.transition(xk, k, j)
                vk = F.eval_affine(xk, k)
                pushed = np.einsum("nij,nj->ni", D, vk)
                vj = F.eval_affine(xj, j)
                cross = np.abs(pushed[:, 0] * vj[:, 1] - pushed[:, 1] * vj[:, 0])
                scale = np.linalg.norm(pushed, axis=1) * np.linalg.norm(vj, axis=1)
                ok = scale > 1e-12
                if np.any(ok):
                    worst = max(worst, float(np.max(cross[ok] / scale[ok])))
        return worst

    @staticmethod
    def classify(F: FoliationSpec, location: SurfacePoint) -> Singularity:
        J = F.jacobian_affine(location.vector[None, :], location.chart)[0]
        lam1, lam2 = (complex(z) for z in np.linalg.eigvals(J))
        if abs(lam2) < 1e-300:
            lam1, lam2 = lam2, lam1
        if abs(lam2) < 1e-300:
            return Singularity(location, (lam1, lam2), complex("nan"), False)
        eta = lam1 / lam2
        if eta.imag < 0.0:
            lam1, lam2 = lam2, lam1
            eta = lam1 / lam2
        hyperbolic = abs(eta.imag) > HYPERBOLIC_RTOL * abs(eta)
        return Singularity(location, (lam1, lam2), eta, hyperbolic)

    @staticmethod
    def _newton(F: FoliationSpec, z: np.ndarray, chart: int, iterations: int = 60) -> np.ndarray:
        z = z.copy()
        for _ in range(iterations):
            v = F.eval_affine(z, chart)
            J = F.jacobian_affine(z, chart)
            det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
            good = np.abs(det) > 1e-14
            safe = np.where(good, det, 1.0)
            d0 = (-v[:, 0] * J[:, 1, 1] + v[:, 1] * J[:, 0, 1]) / safe
            d1 = (-v[:, 1] * J[:, 0, 0] + v[:, 0] * J[:, 1, 0]) / safe
            step = np.stack([d0, d1], axis=1)
            size = np.linalg.norm(step, axis=1)
            step *= np.minimum(1.0, 0.5 / np.maximum(size, 1e-300))[:, None]
            z = np.where(good[:, None], z + step, z)
            z = np.where(np.isfinite(z), z, 10.0)
        return z

    @staticmethod
    def find_singularities(F: FoliationSpec, seeds_per_axis: int = 7) -> List[Singularity]:
        """Grid-seeded Newton per chart, deduplicated by Fubini-Study distance."""
        radius = 2.0 if F.is_local else 1.05
        g = np.linspace(-radius, radius, seeds_per_axis)
        c = (g[:, None] + 1j * g[None, :]).ravel()
        c1, c2 = np.meshgrid(c, c, indexing="ij")
        seeds = np.stack([c1.ravel(), c2.ravel()], axis=1)

        found: List[SurfacePoint] = []
        homog: List[np.ndarray] = []
        for k in F.charts:
            z = FoliationModel._newton(F, seeds, k)
            z = FoliationModel._newton(F, z, k, iterations=5)
            res = np.linalg.norm(F.eval_affine(z, k), axis=1)
            keep = (res <= 1e-10) & np.all(np.abs(z) <= radius + 1e-6, axis=1)
            for point in z[keep]:
                if F.is_local:
                    sp = SurfacePoint.pinned(point, 0)
                else:
                    sp = SurfacePoint.from_affine(point, k)
                X = np.asarray(sp.homogeneous)
                if homog and np.min(SurfaceAtlas.fs_distance(np.array(homog), X[None, :])) < DEDUP_DISTANCE:
                    continue
                homog.append(X)
                found.append(sp)

        found.sort(key=lambda s: (s.chart, s.affine[0].real, s.affine[0].imag,
                                  s.affine[1].real, s.affine[1].imag))
        if not F.is_local:
            expected = F.degree ** 2 + F.degree + 1
            if not found:
                raise SolverDiverged(f"no singularity of {F.name} could be certified")
            if len(found) != expected:
                logger.warning(f"{F.name}: found {len(found)} singularities, "
                               f"expected {expected} for a generic foliation")
        return [FoliationModel.classify(F, s) for s in found]

    @staticmethod
    def regular_flow_box(F: FoliationSpec, p: SurfacePoint, size: float,
                         n_transversal: int = 3, n_nodes: int = 4,
                         cutoff: float = 0.05) -> FlowBox:
        """Plaques as graphs over the dominant field coordinate, with the bi-Lipschitz constant."""
        if F.is_local and p.chart != 0:
            raise ChartUndefined("local models are defined in chart 0 only")
        x = p.vector
        sing = F.singular_points(p.chart)
        if sing.size and np.min(np.linalg.norm(sing - x, axis=1)) < cutoff:
            raise TooCloseToSingularity(f"{p.to_json()} lies within {cutoff} of a singularity")

        v = F.eval_affine(x[None, :], p.chart)[0]
        g = int(np.argmax(np.abs(v)))
        o = 1 - g

        t = np.linspace(-size, size, n_transversal)
        alphas = (t[:, None] + 1j * t[None, :]).ravel()
        s_nodes = np.linspace(-size, size, n_nodes)
        nodes = (s_nodes[:, None] + 1j * s_nodes[None, :]).ravel()

        tau = np.tile(nodes, alphas.size)
        start = np.repeat(x[o] + alphas, nodes.size)

        def slope(s, y):
            pts = np.empty((y.size, 2), dtype=complex)
            pts[:, g] = x[g] + s * tau
            pts[:, o] = y
            w = F.eval_affine(pts, p.chart)
            return tau * w[:, o] / w[:, g]

        sol = solve_ivp(slope, (0.0, 1.0), start.astype(complex), method="DOP853",
                        rtol=1e-12, atol=1e-14, dense_output=True)
        if not sol.success:
            raise TooCloseToSingularity(f"plaque integration failed near {p.to_json()}: {sol.message}")
        plaques = sol.y[:, -1].reshape(alphas.size, nodes.size)

        h = 1e-3
        s_mid = 0.5
        y = [sol.sol(s_mid + k * h) for k in (-2, -1, 1, 2)]
        derivative = (y[0] - 8.0 * y[1] + 8.0 * y[2] - y[3]) / (12.0 * h)
        expected = slope(s_mid, sol.sol(s_mid))
        residual = float(np.max(np.abs(derivative - expected) / np.maximum(1.0, np.abs(expected))))

        ia, ib = np.triu_indices(alphas.size, k=1)
        ratios = np.abs(plaques[ia] - plaques[ib]) / np.abs(alphas[ia] - alphas[ib])[:, None]
        kappa0 = float(max(np.max(ratios), 1.0 / np.min(ratios)))
        logger.debug(f"flow box at {p.to_json()}: graph axis {g}, kappa0 {kappa0:.4f}")
        return FlowBox(p.chart, p, g, alphas, nodes, plaques, kappa0, residual)
