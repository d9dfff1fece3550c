# foliscope_app/density_lab.py

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate
from scipy.spatial import KDTree

from .current_field import GridMeasure, SampleCloudCurrent
from .errors import AtomDetected, ConfigError, FrameMismatch, NonConvergent
from .logger import AppLogger
from .surface_atlas import ChartWindow, SurfaceAtlas

logger = AppLogger.get_logger(__name__)

ATOM_DISTANCE = 1e-12
ATOM_FRACTION = 1e-6
ERROR_BATCHES = 16
PAIR_CHUNK = 2048


def _real4(points: np.ndarray) -> np.ndarray:
    return np.column_stack([points[:, 0].real, points[:, 0].imag, points[:, 1].real, points[:, 1].imag])


def _ball_volume(rho: float) -> float:
    """Euclidean volume of a ball of radius rho in C^2."""
    return 0.5 * np.pi ** 2 * rho ** 4


@dataclass(frozen=True)
class DiagonalFrame:
    """Coordinates (z, w) = (x - y, y) around the diagonal over one chart.

    `partition` frames take the y samples whose max-modulus chart is `chart`, so the
    three partition frames cover the diagonal exactly once. Other frames keep the
    y samples inside `w_window`.
    """
    chart: int
    w_window: ChartWindow
    epsilon0: float = 0.1
    partition: bool = False

    def __post_init__(self):
        if not 0.0 < self.epsilon0 <= 0.3:
            raise ConfigError(f"epsilon0 must lie in (0, 0.3], got {self.epsilon0}")
        if self.w_window.chart != self.chart:
            raise FrameMismatch(f"w-window lives in chart {self.w_window.chart}, frame in chart {self.chart}")

    @classmethod
    def covering(cls, epsilon0: float = 0.1) -> List["DiagonalFrame"]:
        return [cls(k, ChartWindow.unit(k), epsilon0, partition=True) for k in range(3)]

    def theta_contains(self, theta: np.ndarray) -> np.ndarray:
        """Membership in {theta in unit bidisc : |theta_i - 1| < epsilon0}."""
        theta = np.atleast_2d(theta)
        return np.all((np.abs(theta) < 1.0) & (np.abs(theta - 1.0) < self.epsilon0), axis=1)

    def theta_grid(self, count: int) -> np.ndarray:
        """count**2 points of Theta: products of `count` points on a circle inside the disc around 1."""
        center = 1.0 - self.epsilon0 / 2.0
        if count == 1:
            values = np.array([center], dtype=complex)
        else:
            values = center + 0.3 * self.epsilon0 * np.exp(2j * np.pi * np.arange(count) / count)
        pts = np.stack(np.meshgrid(values, values, indexing="ij"), axis=-1).reshape(-1, 2)
        return pts[self.theta_contains(pts)]

    def select_y(self, cloud: SampleCloudCurrent) -> SampleCloudCurrent:
        if len(cloud) == 0:
            return cloud
        if self.partition:
            X = np.empty((len(cloud), 3), dtype=complex)
            for k in np.unique(cloud.charts):
                m = cloud.charts == k
                X[m] = SurfaceAtlas.lift(cloud.points[m], int(k))
            part = cloud.subset(SurfaceAtlas.best_chart(X) == self.chart)
            return part.in_chart(self.chart) if len(part) else part
        return cloud.restrict(self.w_window)


@dataclass
class DilatedProduct:
    """Pairs of the dilated tensor product landing in {|z| < rho} over the frame's w-window."""
    lam: float
    rho: float
    frame: DiagonalFrame
    grid: GridMeasure
    raw: float
    pairs: int
    batch_raw: np.ndarray

    @property
    def mass(self) -> float:
        """Mass against (i dz1 ^ dz1bar) ^ (i dz2 ^ dz2bar)."""
        return self.lam ** 4 * self.raw

    @property
    def theta(self) -> float:
        """Euclidean z-volume mass per unit z-volume: the estimate of the diagonal measure."""
        return self.mass / (4.0 * _ball_volume(self.rho))


@dataclass
class DensityEstimate:
    lambdas: np.ndarray
    theta: np.ndarray
    errors: np.ndarray
    limit: float
    limit_error: float
    pairs: np.ndarray
    monotone: bool
    prefix_limits: List[float] = field(default_factory=list)

    def rows(self) -> List[Tuple[float, float, float, int]]:
        return [(float(l), float(t), float(e), int(p))
                for l, t, e, p in zip(self.lambdas, self.theta, self.errors, self.pairs)]

    def to_json(self) -> Dict:
        return {"theta_mass": self.limit, "error": self.limit_error, "monotone": self.monotone,
                "prefix_limits": self.prefix_limits}


class DensityLab:
    """Dilations of tensor products of sample clouds along the diagonal."""

    @staticmethod
    def _pairs(x: SampleCloudCurrent, y: SampleCloudCurrent, radius: float,
               budget: Optional[int], rng: Optional[np.random.Generator]
               ) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """Candidate (x index, y index, distance) with distance <= radius, sorted by (y, x).

        When the exact pair count exceeds `budget`, y samples are thinned by stratified
        systematic sampling over a coarse w-grid; the returned factor rescales the weights.
        """
        empty = (np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros(0), 1.0)
        if len(x) == 0 or len(y) == 0:
            return empty
        xt = KDTree(_real4(x.points))
        y4 = _real4(y.points)
        keep = np.arange(len(y))
        factor = 1.0
        if budget is not None:
            expected = int(KDTree(y4).count_neighbors(xt, radius))
            if expected > budget:
                cells = np.floor((y4[:, [0, 2]] + 1.0) * 4.0).astype(int)
                order = np.lexsort((np.arange(len(y)), cells[:, 1], cells[:, 0]))
                stride = expected / budget
                start = (rng.random() if rng is not None else 0.5) * stride
                picks = np.unique(np.floor(np.arange(start, len(y), stride)).astype(int))
                keep = np.sort(order[picks])
                factor = len(y) / keep.size
                logger.info(f"Thinned {len(y)} diagonal samples to {keep.size} for a pair budget of {budget}")

        xs, ys, ds = [], [], []
        for lo in range(0, keep.size, PAIR_CHUNK):
            chunk = keep[lo:lo + PAIR_CHUNK]
            found = KDTree(y4[chunk]).sparse_distance_matrix(xt, radius * (1.0 + 1e-12), output_type="ndarray")
            if found.size == 0:
                continue
            yi = chunk[found["i"]]
            xi = found["j"].astype(int)
            ys.append(yi)
            xs.append(xi)
            ds.append(np.linalg.norm(x.points[xi] - y.points[yi], axis=1))
        if not xs:
            return empty
        xi, yi, d = np.concatenate(xs), np.concatenate(ys), np.concatenate(ds)
        order = np.lexsort((xi, yi))
        return xi[order], yi[order], d[order], factor

    @staticmethod
    def _pair_weights(x: SampleCloudCurrent, y: SampleCloudCurrent, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
        e, f = x.directions[xi], y.directions[yi]
        det = e[:, 0] * f[:, 1] - e[:, 1] * f[:, 0]
        return 4.0 * x.weights[xi] * y.weights[yi] * np.abs(det) ** 2

    @staticmethod
    def tensor_dilate(T1: SampleCloudCurrent, T2: SampleCloudCurrent, lam: float, frame: DiagonalFrame,
                      rho: float = 1.0, resolution: int = 32, pair_budget: Optional[int] = None,
                      rng: Optional[np.random.Generator] = None) -> DilatedProduct:
        """(a_lam)_*(T1 (x) T2) on {|z| < rho}, binned over the w-window."""
        if lam < 1.0:
            raise ValueError(f"dilation factor must be >= 1, got {lam}")
        if T1.local != T2.local or (T1.local and frame.chart != 0):
            raise FrameMismatch("local clouds pair only with each other, in chart 0")
        y = frame.select_y(T2)
        x = T1.in_chart(frame.chart)
        xi, yi, d, factor = DensityLab._pairs(x, y, rho / lam, pair_budget, rng)
        inside = lam * d < rho
        xi, yi = xi[inside], yi[inside]
        weights = DensityLab._pair_weights(x, y, xi, yi) * factor
        batch_raw = np.bincount(yi % ERROR_BATCHES, weights=weights, minlength=ERROR_BATCHES)
        grid = GridMeasure.accumulate(frame.w_window, resolution, y.points[yi], lam ** 4 * weights) \
            if xi.size else GridMeasure.empty(frame.w_window, resolution)
        return DilatedProduct(lam, rho, frame, grid, float(np.sum(weights)), int(xi.size), batch_raw)

    @staticmethod
    def check_atoms(T1: SampleCloudCurrent, T2: SampleCloudCurrent, frames: Sequence[DiagonalFrame]):
        """Raise AtomDetected when coincident samples carry a visible share of the product mass."""
        total = float(np.sum(T1.weights)) * float(np.sum(T2.weights))
        joint = 0.0
        for frame in frames:
            y = frame.select_y(T2)
            x = T1.in_chart(frame.chart)
            xi, yi, d, _ = DensityLab._pairs(x, y, ATOM_DISTANCE, None, None)
            close = d < ATOM_DISTANCE
            joint += float(np.sum(x.weights[xi[close]] * y.weights[yi[close]]))
        if total > 0.0 and joint > ATOM_FRACTION * total:
            raise AtomDetected(f"coincident samples carry {joint / total:.3g} of the product mass")

    @staticmethod
    def extrapolate(lambdas: np.ndarray, theta: np.ndarray, errors: np.ndarray) -> Tuple[float, float]:
        """Intercept of a weighted fit theta = m + c / lambda, with its standard error."""
        if lambdas.size == 1:
            return float(theta[0]), float(errors[0])
        floor = max(float(np.max(errors)) * 1e-3, 1e-300)
        weights = 1.0 / np.maximum(errors, floor)
        coeffs, cov = np.polyfit(1.0 / lambdas, theta, 1, w=weights, cov="unscaled")
        return float(coeffs[1]), float(np.sqrt(max(cov[1, 1], 0.0)))

    @staticmethod
    def density_mass_estimate(T1: SampleCloudCurrent, T2: SampleCloudCurrent, lambdas: Sequence[float],
                              frames: Optional[Sequence[DiagonalFrame]] = None, rho: float = 1.0,
                              pair_budget: int = 10_000_000, seed: int = 0, check_atoms: bool = True,
                              progress_callback: Optional[Callable[[str], None]] = None) -> DensityEstimate:
        """Extrapolated mass of the diagonal measure from a schedule of dilations."""
        lambdas = np.asarray(lambdas, dtype=float)
        if lambdas.size == 0 or np.any(np.diff(lambdas) <= 0.0) or np.any(lambdas < 1.0):
            raise ConfigError("lambda schedule must be strictly increasing with every value >= 1")
        if frames is None:
            frames = [DiagonalFrame(0, ChartWindow.unit(0), partition=True)] if T1.local \
                else DiagonalFrame.covering()
        if check_atoms:
            DensityLab.check_atoms(T1, T2, frames)
        rng = np.random.default_rng(seed)

        theta, errors, pairs = [], [], []
        for lam in lambdas:
            raw_batches = np.zeros(ERROR_BATCHES)
            count = 0
            for frame in frames:
                product = DensityLab.tensor_dilate(T1, T2, lam, frame, rho, pair_budget=pair_budget, rng=rng)
                raw_batches += product.batch_raw
                count += product.pairs
            scale = lam ** 4 / (4.0 * _ball_volume(rho))
            estimates = ERROR_BATCHES * raw_batches * scale
            theta.append(float(np.sum(raw_batches) * scale))
            errors.append(float(np.std(estimates, ddof=1) / np.sqrt(ERROR_BATCHES)))
            pairs.append(count)
            if progress_callback:
                progress_callback(f"lambda={lam:g}: theta={theta[-1]:.6g} +- {errors[-1]:.2g} ({count} pairs)")

        theta_arr, err_arr = np.array(theta), np.array(errors)
        if not np.any(theta_arr):
            return DensityEstimate(lambdas, theta_arr, err_arr, 0.0, 0.0, np.array(pairs), True, [0.0])

        prefix = []
        for k in range(2, lambdas.size + 1):
            m, e = DensityLab.extrapolate(lambdas[:k], theta_arr[:k], err_arr[:k])
            prefix.append((m, e))
        for (m0, e0), (m1, e1) in zip(prefix[:-1], prefix[1:]):
            if abs(m1 - m0) > 3.0 * (e0 + e1):
                raise NonConvergent(f"extrapolated mass moved from {m0:.6g} to {m1:.6g} "
                                    f"beyond three error bars ({e0 + e1:.3g})")
        limit, limit_error = DensityLab.extrapolate(lambdas, theta_arr, err_arr)
        monotone = bool(np.all(np.diff(theta_arr) <= 2.0 * (err_arr[1:] + err_arr[:-1])) or
                        np.all(np.diff(theta_arr) >= -2.0 * (err_arr[1:] + err_arr[:-1])))
        return DensityEstimate(lambdas, theta_arr, err_arr, limit, limit_error, np.array(pairs),
                               monotone, [m for m, _ in prefix])

    @staticmethod
    def mixed_mass_ratio(T1: SampleCloudCurrent, T2: SampleCloudCurrent, lam: float,
                         frames: Optional[Sequence[DiagonalFrame]] = None, rho: float = 1.0) -> float:
        """Share of the dilated mass carried by components with a dw factor.

        The (dz)^2 component scales like lam^4 and every mixed one like at most lam^2;
        per pair, the sum of all squared coefficient products is 1.
        """
        frames = frames or DiagonalFrame.covering()
        full = mixed = 0.0
        for frame in frames:
            y = frame.select_y(T2)
            x = T1.in_chart(frame.chart)
            xi, yi, d, _ = DensityLab._pairs(x, y, rho / lam, None, None)
            inside = lam * d < rho
            xi, yi = xi[inside], yi[inside]
            full += float(np.sum(DensityLab._pair_weights(x, y, xi, yi)))
            mixed += float(np.sum(4.0 * x.weights[xi] * y.weights[yi]))
        return mixed / (lam ** 2 * full) if full > 0.0 else 0.0


class YoungOperator:
    """Integral operators on the unit ball of C^2, a real 4-ball, acting on radial profiles.

    "inverse_square" is |x - y|^-2, which lies in L^(1+delta) for delta < 1, and
    "convolution_r" is r^-4 g_r 1{|x - y| < r}. Both kernels depend on |x - y| only, so
    the top eigenfunction of P is radial and the radial model carries the L2 -> L2 norm.
    A profile holds f at the centers of `resolution` equal shells of [0, 1].
    """

    KERNELS = ("inverse_square", "convolution_r")
    SPHERE = 2.0 * np.pi ** 2
    BALL = 0.5 * np.pi ** 2
    SUPERSAMPLE = 8
    ANGLES = 64

    def __init__(self, kernel: str, resolution: int = 128, r: float = 0.1, delta: float = 0.0,
                 g: Optional[Callable[[np.ndarray], np.ndarray]] = None):
        if kernel not in self.KERNELS:
            raise ConfigError(f"unknown kernel {kernel!r}")
        if kernel == "inverse_square" and not 0.0 <= delta < 1.0:
            raise ConfigError(f"delta must lie in [0, 1) for inverse_square, got {delta}")
        if kernel == "convolution_r" and delta != 0.0:
            raise ConfigError("convolution_r is used with delta = 0")
        self.kernel = kernel
        self.resolution = resolution
        self.r = r
        self.delta = delta
        self.g = g
        self.h = 1.0 / resolution
        self.radii = self.h * (np.arange(resolution) + 0.5)
        self.shell = self.SPHERE * self.radii ** 3 * self.h
        self._matrix = self._build_matrix()

    def spherical_mean(self, rho: np.ndarray, s: np.ndarray) -> np.ndarray:
        """Integral of k(x, y) over the sphere |y| = s, unit radius measure, with |x| = rho."""
        rho, s = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(s, dtype=float))
        if self.kernel == "inverse_square":
            return self.SPHERE / np.maximum(rho, s) ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            c = (rho ** 2 + s ** 2 - self.r ** 2) / (2.0 * rho * s)
        c = np.where((rho == 0.0) | (s == 0.0), np.where(np.maximum(rho, s) < self.r, -1.0, 1.0), c)
        cap = np.arccos(np.clip(c, -1.0, 1.0))
        if self.g is None:
            return self.r ** -4 * 2.0 * np.pi * (cap - np.sin(cap) * np.cos(cap))
        nodes, weights = np.polynomial.legendre.leggauss(self.ANGLES)
        theta = 0.5 * cap[..., None] * (nodes + 1.0)
        dist = np.sqrt(np.maximum(rho[..., None] ** 2 + s[..., None] ** 2
                                  - 2.0 * rho[..., None] * s[..., None] * np.cos(theta), 0.0))
        inner = np.sum(weights * np.sin(theta) ** 2 * self.g(dist), axis=-1) * 0.5 * cap
        return self.r ** -4 * 4.0 * np.pi * inner

    def _build_matrix(self) -> np.ndarray:
        """Shell-averaged quadrature weights: (Pf)_i = sum_j M_ij f_j."""
        n, S, h = self.resolution, self.SUPERSAMPLE, self.h
        sub = h * (np.arange(n * S) + 0.5) / S
        values = self.spherical_mean(self.radii[:, None], sub[None, :]) * sub[None, :] ** 3
        return values.reshape(n, n, S).mean(axis=2) * h

    def apply(self, f: np.ndarray) -> np.ndarray:
        """Shellwise quadrature of the integral of k(x, y) f(|y|) dy over the ball."""
        f = np.asarray(f, dtype=float)
        if not np.any(f):
            return np.zeros_like(f)
        return self._matrix @ f

    def l2_norm(self, f: np.ndarray) -> float:
        return float(np.sqrt(np.sum(self.shell * np.asarray(f, dtype=float) ** 2)))

    def operator_norm(self) -> float:
        """L2 -> L2 norm of the discretized operator, from the symmetrized matrix."""
        root = np.sqrt(self.shell)
        return float(np.linalg.norm(root[:, None] * self._matrix / root[None, :], 2))

    def smooth_field(self, rng: np.random.Generator, modes: int = 6) -> np.ndarray:
        """Random low-frequency radial profile."""
        f = np.zeros(self.resolution)
        for p in range(modes):
            f += rng.normal() / (1.0 + p) * np.cos(np.pi * p * self.radii + rng.uniform(0.0, 2.0 * np.pi))
        return f

    def norm_estimate(self, rng: np.random.Generator, trials: int = 100, power_iterations: int = 30) -> float:
        """Largest L2 -> L2 ratio over smooth random profiles and a power iteration."""
        best = 0.0
        for _ in range(trials):
            f = self.smooth_field(rng)
            nf = self.l2_norm(f)
            if nf > 0.0:
                best = max(best, self.l2_norm(self.apply(f)) / nf)
        f = np.abs(self.smooth_field(rng)) + 1.0
        for _ in range(power_iterations):
            pf = self.apply(f)
            norm = self.l2_norm(pf)
            if norm == 0.0:
                break
            best = max(best, norm / self.l2_norm(f))
            f = pf / norm
        return best

    def young_constant(self) -> float:
        """L^(1+delta) norm of k(0, .) against normalized Lebesgue measure on the unit ball."""
        p = 1.0 + self.delta
        if self.kernel == "inverse_square":
            value, _ = integrate.quad(lambda t: t ** (3.0 - 2.0 * p), 0.0, 1.0)
        else:
            value, _ = integrate.quad(lambda t: self.r ** (-4.0 * p) * t ** 3, 0.0, min(self.r, 1.0))
        return float((self.SPHERE * value / self.BALL) ** (1.0 / p))
