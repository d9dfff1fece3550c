# foliscope_app/surface_atlas.py

from dataclasses import dataclass
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from .errors import ChartUndefined, ConfigError

# Chart k uses the two remaining homogeneous indices, in increasing order.
CHART_AXES: Dict[int, Tuple[int, int]] = {0: (1, 2), 1: (0, 2), 2: (0, 1)}

_ZERO = 1e-300


@dataclass(frozen=True)
class SurfacePoint:
    """A point of P^2 carried in a chart, with its homogeneous backing."""
    homogeneous: Tuple[complex, complex, complex]
    chart: int
    affine: Tuple[complex, complex]

    @classmethod
    def from_homogeneous(cls, X: Sequence[complex]) -> "SurfacePoint":
        X = np.asarray(X, dtype=complex)
        if not np.any(np.abs(X) > _ZERO):
            raise ChartUndefined("homogeneous coordinates are all zero")
        k = int(np.argmax(np.abs(X)))
        X = X / X[k]
        a, b = CHART_AXES[k]
        return cls(tuple(complex(z) for z in X), k, (complex(X[a]), complex(X[b])))

    @classmethod
    def from_affine(cls, x: Sequence[complex], chart: int = 0) -> "SurfacePoint":
        """Lift chart coordinates and move to the chart where the point is best conditioned."""
        return cls.from_homogeneous(SurfaceAtlas.lift(np.asarray(x, dtype=complex)[None, :], chart)[0])

    @classmethod
    def pinned(cls, x: Sequence[complex], chart: int = 0) -> "SurfacePoint":
        """Keep the given chart; local models live in chart 0 whatever the modulus."""
        x = np.asarray(x, dtype=complex)
        X = SurfaceAtlas.lift(x[None, :], chart)[0]
        return cls(tuple(complex(z) for z in X), chart, (complex(x[0]), complex(x[1])))

    @classmethod
    def from_json(cls, data: Dict[str, Any], pinned: bool = False) -> "SurfacePoint":
        re1, im1, re2, im2 = (float(v) for v in data["x"])
        builder = cls.pinned if pinned else cls.from_affine
        return builder((complex(re1, im1), complex(re2, im2)), int(data["chart"]))

    def to_json(self) -> Dict[str, Any]:
        x1, x2 = self.affine
        return {"chart": self.chart, "x": [x1.real, x1.imag, x2.real, x2.imag]}

    def to_chart(self, k: int) -> Tuple[complex, complex]:
        return SurfaceAtlas.to_chart(self, k)

    @property
    def vector(self) -> np.ndarray:
        return np.array(self.affine, dtype=complex)

    def is_best_chart(self) -> bool:
        return int(np.argmax(np.abs(np.asarray(self.homogeneous)))) == self.chart


@dataclass(frozen=True)
class ChartWindow:
    """A bidisc (or ball) of given center and radius inside one chart."""
    chart: int
    center: Tuple[complex, complex]
    radius: float
    shape: str = "bidisc"

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ConfigError(f"window radius must be positive, got {self.radius}")
        if self.chart not in CHART_AXES:
            raise ConfigError(f"chart must be 0, 1 or 2, got {self.chart}")
        if self.shape not in ("bidisc", "ball"):
            raise ConfigError(f"unknown window shape {self.shape!r}")

    @classmethod
    def unit(cls, chart: int) -> "ChartWindow":
        """The closed region where `chart` is the max-modulus chart (open bidisc, up to ties)."""
        return cls(chart, (0j, 0j), 1.0 + 1e-12)

    @property
    def center_array(self) -> np.ndarray:
        return np.array(self.center, dtype=complex)

    def contains(self, points: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(points) - self.center_array
        if self.shape == "ball":
            return np.sqrt(np.sum(np.abs(d) ** 2, axis=1)) < self.radius
        return np.all(np.abs(d) < self.radius, axis=1)

    def time_normal(self, points: np.ndarray, tangent: np.ndarray) -> np.ndarray:
        """Unit outward normal of the boundary in a leaf's time plane.

        `tangent` holds dx/dzeta at the points. For a bidisc the coordinate nearest its
        edge decides the normal.
        """
        d = np.atleast_2d(points) - self.center_array
        tangent = np.atleast_2d(tangent)
        if self.shape == "ball":
            grad = np.sum(d * np.conj(tangent), axis=1) / np.maximum(np.linalg.norm(d, axis=1), 1e-300)
        else:
            k = np.argmax(np.abs(d), axis=1)
            rows = np.arange(d.shape[0])
            dk = d[rows, k]
            grad = dk * np.conj(tangent[rows, k]) / np.maximum(np.abs(dk), 1e-300)
        size = np.abs(grad)
        return np.where(size > 0.0, grad / np.maximum(size, 1e-300), 0.0)

    def edges(self, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Cell edges along Re x1 and Re x2."""
        c = self.center_array
        return (np.linspace(c[0].real - self.radius, c[0].real + self.radius, n + 1),
                np.linspace(c[1].real - self.radius, c[1].real + self.radius, n + 1))

    def locate(self, points: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
        """Half-open [lo, hi) cell indices; -1 marks points outside the window."""
        points = np.atleast_2d(points)
        e1, e2 = self.edges(n)
        i = np.searchsorted(e1, points[:, 0].real, side="right") - 1
        j = np.searchsorted(e2, points[:, 1].real, side="right") - 1
        inside = self.contains(points) & (i >= 0) & (i < n) & (j >= 0) & (j < n)
        return np.where(inside, i, -1), np.where(inside, j, -1)

    def to_json(self) -> Dict[str, Any]:
        c1, c2 = self.center
        return {"chart": self.chart, "center": [c1.real, c1.imag, c2.real, c2.imag],
                "radius": self.radius, "shape": self.shape}

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "ChartWindow":
        re1, im1, re2, im2 = (float(v) for v in data["center"])
        return cls(int(data["chart"]), (complex(re1, im1), complex(re2, im2)), float(data["radius"]),
                   str(data.get("shape", "bidisc")))


class SurfaceAtlas:
    """Chart arithmetic and the Fubini-Study form normalized to total volume 1."""

    @staticmethod
    def lift(points: np.ndarray, k: int) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=complex))
        X = np.empty((points.shape[0], 3), dtype=complex)
        a, b = CHART_AXES[k]
        X[:, k] = 1.0
        X[:, a] = points[:, 0]
        X[:, b] = points[:, 1]
        return X

    @staticmethod
    def project(X: np.ndarray, k: int) -> np.ndarray:
        X = np.atleast_2d(X)
        if np.any(np.abs(X[:, k]) <= _ZERO):
            raise ChartUndefined(f"dehomogenizing coordinate of chart {k} vanishes")
        a, b = CHART_AXES[k]
        return np.stack([X[:, a] / X[:, k], X[:, b] / X[:, k]], axis=1)

    @staticmethod
    def to_chart(p: SurfacePoint, k: int) -> Tuple[complex, complex]:
        x = SurfaceAtlas.project(np.asarray(p.homogeneous, dtype=complex)[None, :], k)[0]
        return complex(x[0]), complex(x[1])

    @staticmethod
    def best_chart(X: np.ndarray) -> np.ndarray:
        return np.argmax(np.abs(np.atleast_2d(X)), axis=1)

    @staticmethod
    def rechart(points: np.ndarray, charts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Move every point to its max-modulus chart."""
        points = np.atleast_2d(points)
        X = np.empty((points.shape[0], 3), dtype=complex)
        for k in np.unique(charts):
            m = charts == k
            X[m] = SurfaceAtlas.lift(points[m], int(k))
        best = SurfaceAtlas.best_chart(X)
        out = np.empty_like(points)
        for k in np.unique(best):
            m = best == k
            out[m] = SurfaceAtlas.project(X[m], int(k))
        return out, best

    @staticmethod
    def transition(points: np.ndarray, k: int, j: int) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinates in chart j of chart-k points and the complex Jacobian of the change."""
        points = np.atleast_2d(np.asarray(points, dtype=complex))
        n = points.shape[0]
        if j == k:
            return points.copy(), np.broadcast_to(np.eye(2, dtype=complex), (n, 2, 2)).copy()
        X = SurfaceAtlas.lift(points, k)
        y = SurfaceAtlas.project(X, j)
        E = np.zeros((3, 2))
        a, b = CHART_AXES[k]
        E[a, 0] = 1.0
        E[b, 1] = 1.0
        c, d = CHART_AXES[j]
        Xj = X[:, j][:, None]
        D = np.empty((n, 2, 2), dtype=complex)
        for row, idx in enumerate((c, d)):
            D[:, row, :] = (E[idx][None, :] * Xj - X[:, idx][:, None] * E[j][None, :]) / Xj ** 2
        return y, D

    @staticmethod
    def fs_matrix(points: np.ndarray) -> np.ndarray:
        """Coefficients H of omega against the Euclidean form (i/2) sum dx_j ^ dxbar_j."""
        points = np.atleast_2d(points)
        s = 1.0 + np.sum(np.abs(points) ** 2, axis=1)
        outer = np.conj(points)[:, :, None] * points[:, None, :]
        g = (s[:, None, None] * np.eye(2)[None] - outer) / s[:, None, None] ** 2
        # transpose so that v^* H v is the omega-length of v
        return np.transpose(g, (0, 2, 1)) / np.pi

    @staticmethod
    def fs_volume(points: np.ndarray) -> np.ndarray:
        """Density of omega^2 against Euclidean volume; integrates to 1 over P^2."""
        points = np.atleast_2d(points)
        s = 1.0 + np.sum(np.abs(points) ** 2, axis=1)
        return 2.0 / (np.pi ** 2 * s ** 3)

    @staticmethod
    def fs_density(x: Sequence[complex], k: int = 0) -> Tuple[np.ndarray, float]:
        """(omega coefficient matrix, omega^2 density) at one affine point of chart k."""
        pts = np.asarray(x, dtype=complex)[None, :]
        return SurfaceAtlas.fs_matrix(pts)[0], float(SurfaceAtlas.fs_volume(pts)[0])

    @staticmethod
    def omega_norm2(points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        H = SurfaceAtlas.fs_matrix(points)
        return np.real(np.einsum("ni,nij,nj->n", np.conj(vectors), H, vectors))

    @staticmethod
    def window_mass(window: ChartWindow, compute_chart: int = None,
                    n_radial: int = 16, n_angular: int = 16) -> float:
        """Mass of omega^2 over a bidisc window, pulled back from `compute_chart`."""
        if window.shape != "bidisc":
            raise ConfigError("window_mass integrates bidisc windows only")
        compute_chart = window.chart if compute_chart is None else compute_chart
        nodes, weights = np.polynomial.legendre.leggauss(n_radial)
        rho = 0.5 * window.radius * (nodes + 1.0)
        w_rho = 0.5 * window.radius * weights * rho
        theta = 2.0 * np.pi * np.arange(n_angular) / n_angular
        ring = (rho[:, None] * np.exp(1j * theta)[None, :]).ravel()
        w_ring = np.repeat(w_rho, n_angular) * (2.0 * np.pi / n_angular)
        z1, z2 = np.meshgrid(ring, ring, indexing="ij")
        pts = np.stack([z1.ravel(), z2.ravel()], axis=1) + window.center_array
        w = np.outer(w_ring, w_ring).ravel()
        y, D = SurfaceAtlas.transition(pts, window.chart, compute_chart)
        jac = np.abs(np.linalg.det(D)) ** 2
        return float(np.sum(w * SurfaceAtlas.fs_volume(y) * jac))

    @staticmethod
    def total_mass(n_radial: int = 16, n_angular: int = 16) -> float:
        """Integral of omega^2 over P^2 using the max-modulus partition of the three charts."""
        return sum(SurfaceAtlas.window_mass(ChartWindow(k, (0j, 0j), 1.0), k, n_radial, n_angular)
                   for k in range(3))

    @staticmethod
    def fs_distance(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        """Chordal Fubini-Study distance between homogeneous vectors."""
        X = np.atleast_2d(X)
        Y = np.atleast_2d(Y)
        inner = np.abs(np.sum(np.conj(X) * Y, axis=1)) ** 2
        norms = np.sum(np.abs(X) ** 2, axis=1) * np.sum(np.abs(Y) ** 2, axis=1)
        return np.sqrt(np.clip(1.0 - inner / norms, 0.0, None))
