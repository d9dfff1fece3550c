# foliscope_app/current_field.py

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .artifacts import ArtifactWriter
from .errors import ChartUndefined, GridMismatch
from .foliation_model import FoliationSpec
from .surface_atlas import CHART_AXES, ChartWindow, SurfaceAtlas, SurfacePoint

CLOUD_HEADER = ["chart", "x1_re", "x1_im", "x2_re", "x2_im", "weight", "e1_re", "e1_im", "e2_re", "e2_im"]


@dataclass(eq=False)
class GridMeasure:
    """Masses on an N x N grid over (Re x1, Re x2) of a chart window."""
    window: ChartWindow
    resolution: int
    masses: np.ndarray
    recorded: Optional[float] = None

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        if self.masses.shape != (self.resolution, self.resolution):
            raise GridMismatch(f"masses of shape {self.masses.shape} on a {self.resolution}-grid")
        if np.any(self.masses < 0.0):
            raise ValueError("grid masses must be nonnegative")

    @classmethod
    def empty(cls, window: ChartWindow, resolution: int) -> "GridMeasure":
        return cls(window, resolution, np.zeros((resolution, resolution)))

    @classmethod
    def accumulate(cls, window: ChartWindow, resolution: int, points: np.ndarray,
                   weights: np.ndarray) -> "GridMeasure":
        i, j = window.locate(points, resolution)
        keep = i >= 0
        flat = i[keep] * resolution + j[keep]
        kept = np.asarray(weights, dtype=float)[keep]
        masses = np.zeros(resolution * resolution)
        np.add.at(masses, flat, kept)
        return cls(window, resolution, masses.reshape(resolution, resolution), float(np.sum(kept)))

    def total(self) -> float:
        """Sample total when the grid was binned from a cloud, cell sum otherwise."""
        if self.recorded is not None:
            return self.recorded
        return float(np.sum(self.masses))

    def normalized(self) -> "GridMeasure":
        total = self.total()
        if total <= 0.0:
            return GridMeasure(self.window, self.resolution, self.masses.copy())
        return GridMeasure(self.window, self.resolution, self.masses / total, 1.0)

    def scaled(self, factor: float) -> "GridMeasure":
        recorded = None if self.recorded is None else self.recorded * factor
        return GridMeasure(self.window, self.resolution, self.masses * factor, recorded)

    def rows(self) -> List[Tuple[int, int, float]]:
        i, j = np.indices(self.masses.shape)
        return list(zip(i.ravel().tolist(), j.ravel().tolist(), self.masses.ravel().tolist()))

    def same_layout(self, other: "GridMeasure") -> bool:
        return self.window == other.window and self.resolution == other.resolution

    @staticmethod
    def l1_distance(g1: "GridMeasure", g2: "GridMeasure") -> float:
        """Sum of |G1 - G2| after both are normalized to mass 1."""
        if not g1.same_layout(g2):
            raise GridMismatch("grids differ in window or resolution")
        return float(np.sum(np.abs(g1.normalized().masses - g2.normalized().masses)))


class AtlasMeasure:
    """Per-chart grids of one measure, normalized jointly."""

    @staticmethod
    def total(grids: Sequence[GridMeasure]) -> float:
        return float(sum(g.total() for g in grids))

    @staticmethod
    def normalized(grids: Sequence[GridMeasure]) -> List[GridMeasure]:
        total = AtlasMeasure.total(grids)
        if total <= 0.0:
            return [g.scaled(1.0) for g in grids]
        return [g.scaled(1.0 / total) for g in grids]

    @staticmethod
    def l1_distance(a: Sequence[GridMeasure], b: Sequence[GridMeasure]) -> float:
        if len(a) != len(b) or any(not x.same_layout(y) for x, y in zip(a, b)):
            raise GridMismatch("atlas grids differ in layout")
        na, nb = AtlasMeasure.normalized(a), AtlasMeasure.normalized(b)
        return float(sum(np.sum(np.abs(x.masses - y.masses)) for x, y in zip(na, nb)))

    @staticmethod
    def mean(collections: Sequence[Sequence[GridMeasure]]) -> List[GridMeasure]:
        normed = [AtlasMeasure.normalized(c) for c in collections]
        out = []
        for parts in zip(*normed):
            out.append(GridMeasure(parts[0].window, parts[0].resolution,
                                   np.mean([p.masses for p in parts], axis=0)))
        return out


@dataclass(eq=False)
class SampleCloudCurrent:
    """Directed positive current as weighted point samples with unit leaf directions.

    `weights` are Euclidean areas in the sample's chart; a sample pairs with a (1,1)-form
    of coefficient matrix P (against (i/2) sum dx ^ dxbar) as weight * e^* P e.
    """
    charts: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    directions: np.ndarray
    normalized: bool = False
    local: bool = False

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex).reshape(-1, 2)
        n = self.points.shape[0]
        self.charts = np.broadcast_to(np.asarray(self.charts, dtype=int), (n,)).copy()
        self.weights = np.asarray(self.weights, dtype=float).reshape(n)
        self.directions = np.asarray(self.directions, dtype=complex).reshape(n, 2)
        if np.any(self.weights <= 0.0):
            raise ValueError("sample weights must be positive")
        norms = np.linalg.norm(self.directions, axis=1)
        if np.any(norms <= 0.0):
            raise ValueError("sample directions must be nonzero")
        self.directions = self.directions / norms[:, None]

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls, local: bool = False) -> "SampleCloudCurrent":
        return cls(np.zeros(0, dtype=int), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), local=local)

    @classmethod
    def concat(cls, clouds: Sequence["SampleCloudCurrent"]) -> "SampleCloudCurrent":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(np.concatenate([c.charts for c in clouds]),
                   np.concatenate([c.points for c in clouds]),
                   np.concatenate([c.weights for c in clouds]),
                   np.concatenate([c.directions for c in clouds]),
                   local=all(c.local for c in clouds))

    def subset(self, mask: np.ndarray) -> "SampleCloudCurrent":
        return SampleCloudCurrent(self.charts[mask], self.points[mask], self.weights[mask],
                                  self.directions[mask], self.normalized, self.local)

    def scaled(self, factor: float) -> "SampleCloudCurrent":
        return SampleCloudCurrent(self.charts, self.points, self.weights * factor,
                                  self.directions, False, self.local)

    def sample_masses(self) -> np.ndarray:
        """Per-sample mass against omega."""
        if len(self) == 0:
            return np.zeros(0)
        return self.weights * SurfaceAtlas.omega_norm2(self.points, self.directions)

    def mass(self) -> float:
        return float(np.sum(self.sample_masses()))

    def normalize(self) -> "SampleCloudCurrent":
        m = self.mass()
        if m <= 0.0:
            return self
        out = self.scaled(1.0 / m)
        out.normalized = True
        return out

    def in_chart(self, k: int) -> "SampleCloudCurrent":
        """Express every sample in chart k, dropping the ones chart k cannot see."""
        if self.local and k != 0:
            raise ChartUndefined("local clouds live in chart 0 only")
        parts = []
        for j in np.unique(self.charts):
            j = int(j)
            m = self.charts == j
            pts = self.points[m]
            X = SurfaceAtlas.lift(pts, j)
            ok = np.abs(X[:, k]) > 1e-12
            if not np.any(ok):
                continue
            y, D = SurfaceAtlas.transition(pts[ok], j, k)
            e = np.einsum("nij,nj->ni", D, self.directions[m][ok])
            stretch = np.sum(np.abs(e) ** 2, axis=1)
            parts.append(SampleCloudCurrent(np.full(y.shape[0], k), y, self.weights[m][ok] * stretch,
                                            e, local=self.local))
        out = SampleCloudCurrent.concat(parts) if parts else SampleCloudCurrent.empty(self.local)
        out.normalized = self.normalized
        return out

    def restrict(self, window: ChartWindow) -> "SampleCloudCurrent":
        moved = self.in_chart(window.chart)
        return moved.subset(window.contains(moved.points)) if len(moved) else moved

    def to_grid(self, window: ChartWindow, resolution: int) -> GridMeasure:
        part = self.restrict(window)
        if len(part) == 0:
            return GridMeasure.empty(window, resolution)
        return GridMeasure.accumulate(window, resolution, part.points, part.sample_masses())

    def directedness_residual(self, foliation: FoliationSpec) -> float:
        """Largest |e x v| / |v| over samples."""
        if len(self) == 0:
            return 0.0
        v = foliation.eval_affine(self.points, self.charts)
        cross = np.abs(self.directions[:, 0] * v[:, 1] - self.directions[:, 1] * v[:, 0])
        return float(np.max(cross / np.maximum(np.linalg.norm(v, axis=1), 1e-300)))


class CurrentField:
    """Lelong indicators and comparison helpers on sample clouds."""

    @staticmethod
    def _ball_weights(T: SampleCloudCurrent, a: SurfacePoint, r: float) -> Tuple[np.ndarray, np.ndarray]:
        """Euclidean area weights of samples, in a's chart, and their distances to a."""
        moved = T.in_chart(a.chart)
        if len(moved) == 0:
            return np.zeros(0), np.zeros(0)
        d = np.linalg.norm(moved.points - a.vector[None, :], axis=1)
        return moved.weights, d

    @staticmethod
    def lelong_indicator(T: SampleCloudCurrent, a: SurfacePoint, r: float) -> float:
        """(pi r^2)^-1 times the mass of T in B(a, r) against the Euclidean Kahler form.

        The form is normalized so that a complex line through a scores exactly 1.
        """
        w, d = CurrentField._ball_weights(T, a, r)
        return float(np.sum(w[d < r])) / (np.pi * r * r)

    @staticmethod
    def lelong_profile(T: SampleCloudCurrent, a: SurfacePoint, radii: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
        """nu(T, a, r) over radii with a one-sigma Monte Carlo noise estimate."""
        w, d = CurrentField._ball_weights(T, a, max(radii))
        values, sigmas = [], []
        for r in radii:
            inside = w[d < r]
            values.append(float(np.sum(inside)) / (np.pi * r * r))
            sigmas.append(float(np.sqrt(np.sum(inside ** 2))) / (np.pi * r * r))
        return np.array(values), np.array(sigmas)


class CurrentBuilder:
    """Sample-cloud fixtures: line discs, projective lines, the Fubini-Study form."""

    @staticmethod
    def line_disc(center: Sequence[complex], direction: Sequence[complex], radius: float,
                  n_radial: int = 200, n_angular: int = 64, chart: int = 0,
                  local: bool = True) -> SampleCloudCurrent:
        """Disc {a + t e : |t| < radius} of a complex line, ring by ring with exact ring areas."""
        a = np.asarray(center, dtype=complex)
        e = np.asarray(direction, dtype=complex)
        e = e / np.linalg.norm(e)
        edges = np.linspace(0.0, radius, n_radial + 1)
        mid = 0.5 * (edges[:-1] + edges[1:])
        ring_area = np.pi * (edges[1:] ** 2 - edges[:-1] ** 2) / n_angular
        theta = 2.0 * np.pi * (np.arange(n_angular) + 0.5) / n_angular
        t = (mid[:, None] * np.exp(1j * theta)[None, :]).ravel()
        pts = a[None, :] + t[:, None] * e[None, :]
        weights = np.repeat(ring_area, n_angular)
        return SampleCloudCurrent(np.full(t.size, chart), pts, weights,
                                  np.broadcast_to(e, pts.shape), local=local)

    @staticmethod
    def projective_line(normal: Sequence[complex], n: int, rng: np.random.Generator) -> SampleCloudCurrent:
        """Fubini-Study distributed samples on {<normal, X> = 0}, total omega-mass 1."""
        c = np.asarray(normal, dtype=complex)
        # orthonormal basis of the plane <c, X> = 0
        basis = np.linalg.svd(c[None, :])[2][1:].conj()
        u1, u2 = basis[0], basis[1]
        s = rng.random(n)
        modulus = np.sqrt(s / (1.0 - s))
        t = modulus * np.exp(2j * np.pi * rng.random(n))
        X = u1[None, :] + t[:, None] * u2[None, :]
        charts = SurfaceAtlas.best_chart(X)
        pts = np.empty((n, 2), dtype=complex)
        dirs = np.empty((n, 2), dtype=complex)
        for k in range(3):
            m = charts == k
            if not np.any(m):
                continue
            Xm = X[m]
            pts[m] = SurfaceAtlas.project(Xm, k)
            ka, kb = CHART_AXES[k]
            denom = Xm[:, k] ** 2
            dirs[m, 0] = (u2[ka] * Xm[:, k] - Xm[:, ka] * u2[k]) / denom
            dirs[m, 1] = (u2[kb] * Xm[:, k] - Xm[:, kb] * u2[k]) / denom
        unit = dirs / np.linalg.norm(dirs, axis=1)[:, None]
        per_sample = SurfaceAtlas.omega_norm2(pts, unit)
        return SampleCloudCurrent(charts, pts, 1.0 / (n * per_sample), unit)

    @staticmethod
    def omega_cloud(n: int, rng: np.random.Generator) -> SampleCloudCurrent:
        """The form omega as a current: FS-uniform points, each split along the eigenvectors of adj(H)."""
        X = rng.normal(size=(n, 3)) + 1j * rng.normal(size=(n, 3))
        charts = SurfaceAtlas.best_chart(X)
        pts = np.empty((n, 2), dtype=complex)
        for k in range(3):
            m = charts == k
            pts[m] = SurfaceAtlas.project(X[m], k)
        H = SurfaceAtlas.fs_matrix(pts)
        adj = np.empty_like(H)
        adj[:, 0, 0] = H[:, 1, 1]
        adj[:, 1, 1] = H[:, 0, 0]
        adj[:, 0, 1] = -H[:, 0, 1]
        adj[:, 1, 0] = -H[:, 1, 0]
        # adj(H) is Hermitian; columns of vecs are its unit eigenvectors
        mu, vecs = np.linalg.eigh(adj)
        volume = SurfaceAtlas.fs_volume(pts) * n
        weights = mu / volume[:, None]
        return SampleCloudCurrent(np.repeat(charts, 2), np.repeat(pts, 2, axis=0),
                                  weights.ravel(), np.transpose(vecs, (0, 2, 1)).reshape(-1, 2))

    @staticmethod
    def save_csv(cloud: SampleCloudCurrent, path: Union[str, Path]) -> str:
        rows = np.column_stack([
            cloud.charts, cloud.points[:, 0].real, cloud.points[:, 0].imag,
            cloud.points[:, 1].real, cloud.points[:, 1].imag, cloud.weights,
            cloud.directions[:, 0].real, cloud.directions[:, 0].imag,
            cloud.directions[:, 1].real, cloud.directions[:, 1].imag,
        ]) if len(cloud) else np.zeros((0, len(CLOUD_HEADER)))
        return ArtifactWriter.write_csv(
            path, CLOUD_HEADER,
            ([int(r[0])] + [float(v) for v in r[1:]] for r in rows))

    @staticmethod
    def load_csv(path: Union[str, Path], local: Optional[bool] = None) -> SampleCloudCurrent:
        _, data = ArtifactWriter.read_csv(path)
        if data.size == 0:
            return SampleCloudCurrent.empty(bool(local))
        charts = data[:, 0].astype(int)
        pts = np.stack([data[:, 1] + 1j * data[:, 2], data[:, 3] + 1j * data[:, 4]], axis=1)
        dirs = np.stack([data[:, 6] + 1j * data[:, 7], data[:, 8] + 1j * data[:, 9]], axis=1)
        return SampleCloudCurrent(charts, pts, data[:, 5], dirs,
                                  local=bool(local) if local is not None else False)
