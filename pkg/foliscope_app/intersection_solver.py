# foliscope_app/intersection_solver.py

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import KDTree

from .errors import NewtonStall
from .logger import AppLogger
from .singularity_lab import HalfLine, HarmonicWeight, SectorModel

logger = AppLogger.get_logger(__name__)

SCAN_STEP = 0.15
BOX_MARGIN = 20.0
NEWTON_ITERATIONS = 60
NEWTON_STEP_TOL = 1e-12
BACKTRACKS = 30
RESIDUAL_TOL = 1e-10
DEDUPE_DISTANCE = 1e-6
AA_SEARCH = 8
REGIONS = ("A", "B", "C")


def _real4(zeta: np.ndarray, zcheck: np.ndarray) -> np.ndarray:
    return np.column_stack([zeta.real, zeta.imag, zcheck.real, zcheck.imag])


@dataclass
class IntersectionSet:
    """Roots (zeta, zcheck) in the truncated sector product of x(zeta) - y(zcheck) = theta / lam."""
    alpha: complex
    beta: complex
    theta: np.ndarray
    lam: float
    epsilon: float
    t_max: float
    zeta: np.ndarray
    zcheck: np.ndarray
    residual: np.ndarray
    multiplicity: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    region: np.ndarray
    stalls: int = 0
    dropped: int = 0

    def __len__(self) -> int:
        return int(self.zeta.size)

    @property
    def scale(self) -> float:
        return float(np.linalg.norm(self.theta)) / self.lam

    def points(self) -> np.ndarray:
        """Roots as points of R^4."""
        return _real4(self.zeta, self.zcheck)

    def pairs(self) -> np.ndarray:
        return np.column_stack([self.zeta, self.zcheck])

    def subset(self, mask: np.ndarray) -> "IntersectionSet":
        mask = np.asarray(mask, dtype=bool)
        return IntersectionSet(self.alpha, self.beta, self.theta, self.lam, self.epsilon, self.t_max,
                               self.zeta[mask], self.zcheck[mask], self.residual[mask],
                               self.multiplicity[mask], self.rho1[mask], self.rho2[mask],
                               self.region[mask], self.stalls)

    def in_region(self, tag: str) -> "IntersectionSet":
        return self.subset(self.region == tag)

    def reduced_residual(self, model: SectorModel, ref: int, other: int) -> float:
        """Residual of root `other` in the system written around root `ref`, relative to |theta|/lam.

        With xi = zeta' - zeta and xi' = zcheck' - zcheck both
        rho1 (e^{i eta xi} - 1) - (e^{i eta xi'} - 1) and rho2 (e^{i xi} - 1) - (e^{i xi'} - 1) vanish.
        """
        xi = self.zeta[other] - self.zeta[ref]
        xic = self.zcheck[other] - self.zcheck[ref]
        y1, y2 = model.leaf_point(self.beta, self.zcheck[ref])
        r1 = self.rho1[ref] * np.expm1(1j * model.eta * xi) - np.expm1(1j * model.eta * xic)
        r2 = self.rho2[ref] * np.expm1(1j * xi) - np.expm1(1j * xic)
        return float(max(abs(r1 * y1), abs(r2 * y2)) / self.scale)

    def to_json(self) -> List[Dict]:
        return [{"zeta": [float(z.real), float(z.imag)],
                 "zcheck": [float(w.real), float(w.imag)],
                 "rho1": [float(r1.real), float(r1.imag)],
                 "rho2": [float(r2.real), float(r2.imag)],
                 "region": str(tag),
                 "multiplicity": int(mult),
                 "residual": float(res)}
                for z, w, r1, r2, tag, mult, res in zip(self.zeta, self.zcheck, self.rho1, self.rho2,
                                                       self.region, self.multiplicity, self.residual)]


@dataclass
class AACondition:
    """delta = (arg a - arg b) - i(log|a| - log|b|) - 2 n pi + 2 m eta pi at the minimizing (n, m)."""
    holds: bool
    delta: complex
    n: int
    m: int
    N: float
    epsilon: float

    def shifted_level(self, s: float) -> float:
        if self.delta == 0:
            return -np.inf
        return s + float(np.log(abs(self.delta))) + self.N


@dataclass
class SliceMass:
    value: float
    tail_bound: float
    roots: IntersectionSet


# Reference sets in the sector product; distance() takes root pairs (zeta, zcheck)
@dataclass
class PointPairs:
    pairs: np.ndarray

    def distance(self, zeta: np.ndarray, zcheck: np.ndarray) -> np.ndarray:
        pairs = np.asarray(self.pairs, dtype=complex).reshape(-1, 2)
        if pairs.shape[0] == 0:
            return np.full(np.shape(zeta), np.inf)
        tree = KDTree(_real4(pairs[:, 0], pairs[:, 1]))
        d, _ = tree.query(_real4(np.asarray(zeta), np.asarray(zcheck)))
        return np.asarray(d)


@dataclass
class ProductSet:
    """first x second, each a HalfLine (length 0 for a point)."""
    first: HalfLine
    second: HalfLine

    def distance(self, zeta: np.ndarray, zcheck: np.ndarray) -> np.ndarray:
        return np.hypot(self.first.distance(zeta), self.second.distance(zcheck))


@dataclass
class DiagonalSet:
    """{(xi, xi) : xi on line}; |(z, w) - (xi, xi)|^2 = 2|(z + w)/2 - xi|^2 + |z - w|^2 / 2."""
    line: HalfLine

    def distance(self, zeta: np.ndarray, zcheck: np.ndarray) -> np.ndarray:
        zeta, zcheck = np.asarray(zeta), np.asarray(zcheck)
        mid = self.line.distance(0.5 * (zeta + zcheck))
        return np.sqrt(2.0 * mid ** 2 + 0.5 * np.abs(zeta - zcheck) ** 2)


@dataclass
class UnionSet:
    parts: List = field(default_factory=list)

    def distance(self, zeta: np.ndarray, zcheck: np.ndarray) -> np.ndarray:
        out = np.full(np.shape(zeta), np.inf)
        for part in self.parts:
            out = np.minimum(out, part.distance(zeta, zcheck))
        return out


ReferenceSet = Union[PointPairs, ProductSet, DiagonalSet, UnionSet]


def point(z: complex) -> HalfLine:
    return HalfLine(complex(z), 1.0 + 0j, 0.0)


class PointSetChecks:
    """Sparseness and domination checks on finite point sets."""

    @staticmethod
    def max_ball_count(points: np.ndarray, radius: float = 1.0, spacing: float = 0.5) -> int:
        """Largest number of points in an open ball of `radius` centred at a point or at a lattice node near one."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        if points.shape[0] == 0:
            return 0
        tree = KDTree(points)
        open_radius = np.nextafter(radius, 0.0)
        steps = np.arange(-radius, radius + 0.5 * spacing, spacing)
        offsets = np.array(list(itertools.product(steps, repeat=points.shape[1])))
        offsets = offsets[np.linalg.norm(offsets, axis=1) < radius + spacing]
        nodes = (np.round(points / spacing) * spacing)[:, None, :] + offsets[None, :, :]
        nodes = np.unique(nodes.reshape(-1, points.shape[1]), axis=0)
        centers = np.vstack([points, nodes])
        counts = tree.query_ball_point(centers, open_radius, return_length=True)
        return int(np.max(counts))

    @staticmethod
    def sparse_check(points: np.ndarray, N: int) -> bool:
        return PointSetChecks.max_ball_count(points) <= N

    @staticmethod
    def domination_distance(zeta: np.ndarray, zcheck: np.ndarray, reference: ReferenceSet) -> float:
        """Largest distance from a root pair to the reference set (0 for no roots)."""
        zeta = np.atleast_1d(np.asarray(zeta, dtype=complex))
        if zeta.size == 0:
            return 0.0
        return float(np.max(reference.distance(zeta, np.atleast_1d(np.asarray(zcheck, dtype=complex)))))

    @staticmethod
    def dominated_check(pairs: np.ndarray, reference: Union[ReferenceSet, np.ndarray], kappa: float) -> bool:
        """Every pair lies within kappa of the reference set."""
        pairs = np.asarray(pairs, dtype=complex).reshape(-1, 2)
        if isinstance(reference, np.ndarray):
            reference = PointPairs(reference)
        return PointSetChecks.domination_distance(pairs[:, 0], pairs[:, 1], reference) <= kappa


class IntersectionSolver:
    """Grid scan plus damped Newton for x(zeta) - y(zcheck) = theta / lam in the sector product."""

    @staticmethod
    def residual(model: SectorModel, alpha: complex, beta: complex, shift: np.ndarray,
                 z: np.ndarray) -> np.ndarray:
        x1, x2 = model.leaf_point(alpha, z[:, 0])
        y1, y2 = model.leaf_point(beta, z[:, 1])
        return np.column_stack([x1 - y1 - shift[0], x2 - y2 - shift[1]])

    @staticmethod
    def _seeds(model: SectorModel, alpha: complex, beta: complex, shift: np.ndarray,
               t_max: float, step: float) -> np.ndarray:
        """Cells whose residual is small against a Lipschitz bound, with zcheck eliminated.

        The second equation fixes y2 = x2 - shift2, so zcheck = -i log y2 - log|beta|/b + 2 pi k.
        """
        centers = (np.arange(int(np.ceil(t_max / step))) + 0.5) * step
        P, Q = np.meshgrid(centers, centers, indexing="ij")
        zeta = model.from_sector_coords(P.ravel(), Q.ravel())
        x1, x2 = model.leaf_point(alpha, zeta)
        y2 = x2 - shift[1]
        with np.errstate(divide="ignore"):
            v_check = -np.log(np.abs(y2))
        u_base = np.angle(y2) - np.log(abs(beta)) / model.b
        q_base = u_base + model.a * v_check / model.b
        keep = np.isfinite(v_check) & (v_check > -step) & (v_check < t_max + step)
        if not np.any(keep):
            return np.zeros((0, 2), dtype=complex)

        cell_radius = 0.5 * step * np.hypot(1.0 + abs(model.a) / model.b, 1.0)
        growth = 3.0 * np.exp((abs(model.eta) + 1.0) * cell_radius)
        k_lo = int(np.floor(np.min((-step - q_base[keep]) / (2.0 * np.pi))))
        k_hi = int(np.ceil(np.max((t_max + step - q_base[keep]) / (2.0 * np.pi))))
        seeds = []
        for k in range(k_lo, k_hi + 1):
            qk = q_base + 2.0 * np.pi * k
            mask = keep & (qk > -step) & (qk < t_max + step)
            if not np.any(mask):
                continue
            zc = (u_base[mask] + 2.0 * np.pi * k) + 1j * v_check[mask]
            y1, _ = model.leaf_point(beta, zc)
            F = x1[mask] - y1 - shift[0]
            lip = abs(model.eta) * (np.abs(x1[mask]) + np.abs(y1) * np.abs(x2[mask]) / np.abs(y2[mask]))
            hit = np.abs(F) <= growth * lip * cell_radius
            seeds.append(np.column_stack([zeta[mask][hit], zc[hit]]))
        return np.vstack(seeds) if seeds else np.zeros((0, 2), dtype=complex)

    @staticmethod
    def _newton(model: SectorModel, alpha: complex, beta: complex, shift: np.ndarray,
                z: np.ndarray, t_max: float):
        """Damped Newton on the 2x2 complex system; returns (roots, converged mask, stall count)."""
        z = z.copy()
        n = z.shape[0]
        active = np.ones(n, dtype=bool)
        converged = np.zeros(n, dtype=bool)
        eta = model.eta
        for _ in range(NEWTON_ITERATIONS):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            zi = z[idx]
            x1, x2 = model.leaf_point(alpha, zi[:, 0])
            y1, y2 = model.leaf_point(beta, zi[:, 1])
            G = np.column_stack([x1 - y1 - shift[0], x2 - y2 - shift[1]])
            gnorm = np.linalg.norm(G, axis=1)
            a11, a12, a21, a22 = 1j * eta * x1, -1j * eta * y1, 1j * x2, -1j * y2
            det = a11 * a22 - a12 * a21
            ok = np.abs(det) > 1e-300
            safe = np.where(ok, det, 1.0)
            d = np.column_stack([(-G[:, 0] * a22 + G[:, 1] * a12) / safe,
                                 (-G[:, 1] * a11 + G[:, 0] * a21) / safe])

            t = np.ones(idx.size)
            improved = np.zeros(idx.size, dtype=bool)
            for _ in range(BACKTRACKS):
                pending = ~improved & ok
                if not np.any(pending):
                    break
                trial = zi[pending] + t[pending, None] * d[pending]
                tn = np.linalg.norm(IntersectionSolver.residual(model, alpha, beta, shift, trial), axis=1)
                better = np.isfinite(tn) & (tn < gnorm[pending])
                sub = np.flatnonzero(pending)
                improved[sub[better]] = True
                t[sub[~better]] *= 0.5

            step = t * np.linalg.norm(d, axis=1)
            z[idx[improved]] = zi[improved] + t[improved, None] * d[improved]
            done = (gnorm == 0.0) | (improved & (step < NEWTON_STEP_TOL)) | \
                (~improved & ok & (np.linalg.norm(d, axis=1) < 1e-9))
            converged[idx[done]] = True
            active[idx[done]] = False
            active[idx[~ok | (~improved & ~done)]] = False

            p1, q1 = model.sector_coords(z[:, 0])
            p2, q2 = model.sector_coords(z[:, 1])
            escaped = ~np.isfinite(z).all(axis=1) | (np.minimum.reduce([p1, q1, p2, q2]) < -1.0) | \
                (np.maximum.reduce([p1, q1, p2, q2]) > t_max + 2.0)
            active &= ~escaped

        stalls = int(np.count_nonzero(active))
        if stalls:
            logger.debug(f"{stalls} Newton runs stalled after {NEWTON_ITERATIONS} iterations")
        return z, converged, stalls

    @staticmethod
    def _dedupe(z: np.ndarray, residual: np.ndarray) -> np.ndarray:
        """Indices of distinct roots, the best-residual representative of each cluster."""
        if z.shape[0] == 0:
            return np.zeros(0, dtype=int)
        tree = KDTree(_real4(z[:, 0], z[:, 1]))
        order = np.argsort(residual, kind="stable")
        taken = np.zeros(z.shape[0], dtype=bool)
        kept = []
        for i in order:
            if taken[i]:
                continue
            kept.append(i)
            taken[tree.query_ball_point(_real4(z[i:i + 1, 0], z[i:i + 1, 1])[0], DEDUPE_DISTANCE)] = True
        kept = np.array(kept, dtype=int)
        # canonical order so reruns list roots identically
        key = np.lexsort((z[kept, 1].imag, z[kept, 1].real, z[kept, 0].imag, z[kept, 0].real))
        return kept[key]

    @staticmethod
    def solve(model: SectorModel, alpha: complex, beta: complex, theta: Sequence[complex], lam: float,
              epsilon: float = 0.05, t_max: Optional[float] = None, step: float = SCAN_STEP,
              raise_on_stall: bool = False) -> IntersectionSet:
        """All roots in {0 <= p, q <= t_max}^2 (sector coordinates of both unknowns)."""
        theta = np.asarray(theta, dtype=complex)
        if lam <= 1.0:
            raise ValueError(f"lambda must exceed 1, got {lam}")
        s = float(np.log(lam))
        t_max = s + BOX_MARGIN if t_max is None else float(t_max)
        shift = theta / lam
        scale = float(np.linalg.norm(theta)) / lam

        seeds = IntersectionSolver._seeds(model, alpha, beta, shift, t_max, step)
        z, converged, stalls = IntersectionSolver._newton(model, alpha, beta, shift, seeds, t_max)
        if stalls and raise_on_stall:
            raise NewtonStall(f"{stalls} of {seeds.shape[0]} Newton runs stalled")
        z = z[converged]
        res = np.linalg.norm(IntersectionSolver.residual(model, alpha, beta, shift, z), axis=1)
        p1, q1 = model.sector_coords(z[:, 0])
        p2, q2 = model.sector_coords(z[:, 1])
        lo = np.minimum.reduce([p1, q1, p2, q2])
        hi = np.maximum.reduce([p1, q1, p2, q2])
        in_box = (lo >= -1e-9) & (hi <= t_max)
        good = (res <= RESIDUAL_TOL * scale) & in_box
        dropped = int(np.count_nonzero(in_box & ~good))
        if dropped:
            logger.warning(f"{dropped} converged roots at s={s:.4g} dropped for residual above "
                           f"{RESIDUAL_TOL:.1e} x |theta|/lam")
        z, res = z[good], res[good]
        kept = IntersectionSolver._dedupe(z, res)
        z, res = z[kept], res[kept]

        x1, x2 = model.leaf_point(alpha, z[:, 0])
        y1, y2 = model.leaf_point(beta, z[:, 1])
        rho1, rho2 = x1 / y1, x2 / y2
        det = np.abs(x1 * y2 - y1 * x2)
        multiplicity = np.where(det <= 1e-8 * (np.abs(x1 * y2) + np.abs(y1 * x2)), 2, 1)
        near1 = np.abs(rho1 - 1.0) <= epsilon
        near2 = np.abs(rho2 - 1.0) <= epsilon
        region = np.where(near1 & near2, "A", np.where(near1 | near2, "B", "C"))
        if stalls:
            logger.info(f"{stalls} Newton stalls while solving at s={s:.4g}; {z.shape[0]} roots kept")
        return IntersectionSet(alpha, beta, theta, float(lam), epsilon, t_max, z[:, 0].copy(), z[:, 1].copy(),
                               res, multiplicity, rho1, rho2, region, stalls, dropped)

    @staticmethod
    def aa_condition(model: SectorModel, alpha: complex, beta: complex, epsilon: float,
                     N: Optional[float] = None) -> AACondition:
        """Closeness of alpha and beta modulo the leaf monodromy, searched over |n|, |m| <= 8.

        The default N is large enough that region A is empty whenever the condition fails.
        """
        if N is None:
            N = 1.05 * (1.0 + abs(model.eta)) * (-np.log1p(-epsilon)) / epsilon
        arg_a = np.mod(np.angle(alpha), 2.0 * np.pi)
        arg_b = np.mod(np.angle(beta), 2.0 * np.pi)
        base = (arg_a - arg_b) - 1j * (np.log(abs(alpha)) - np.log(abs(beta)))
        ks = np.arange(-AA_SEARCH, AA_SEARCH + 1)
        n, m = np.meshgrid(ks, ks, indexing="ij")
        delta = base - 2.0 * np.pi * n + 2.0 * np.pi * model.eta * m
        best = np.unravel_index(np.argmin(np.abs(delta)), delta.shape)
        value = complex(delta[best])
        return AACondition(bool(abs(value) <= N * epsilon), value, int(n[best]), int(m[best]), float(N), epsilon)

    @staticmethod
    def region_a_reference(model: SectorModel, s: float, aa: AACondition) -> UnionSet:
        """Diagonals over Q and over Lambda_{i,s'} (s' from the AA shift); empty when AA fails."""
        if not aa.holds:
            return UnionSet([])
        parts: List = [DiagonalSet(model.q_line())]
        shifted = aa.shifted_level(s)
        if shifted >= 0.0:
            parts += [DiagonalSet(model.lambda_line(1, shifted)), DiagonalSet(model.lambda_line(2, shifted))]
        return UnionSet(parts)

    @staticmethod
    def region_c_reference(model: SectorModel, s: float) -> UnionSet:
        l1, l2 = model.lambda_line(1, s), model.lambda_line(2, s)
        l1_inf, l2_inf = model.lambda_split(1, s)[1], model.lambda_split(2, s)[1]
        corner = point(model.zeta_s(s))
        q_inf = model.q_tail(s)
        return UnionSet([ProductSet(l1_inf, l2), ProductSet(l1, l2_inf),
                         ProductSet(l2_inf, l1), ProductSet(l2, l1_inf),
                         ProductSet(corner, q_inf), ProductSet(q_inf, corner)])

    @staticmethod
    def slice_tail_bound(model: SectorModel, roots: IntersectionSet, H_alpha: HarmonicWeight,
                         H_beta: HarmonicWeight) -> float:
        """Bound on the slice mass of roots beyond the truncation box.

        Escaping roots follow at most ten half-lines with at most N_obs roots per unit ball;
        along them one factor decays like |zeta|^-gamma and the other stays below its sup.
        """
        R = roots.t_max * model.b / abs(model.eta)
        worst = 0.0
        for H, other in ((H_alpha, H_beta), (H_beta, H_alpha)):
            mass, radius = H.decay_data()
            sup = other.sup_bound()
            if not (np.isfinite(mass) and np.isfinite(sup)) or R ** model.gamma < 2.0 * radius:
                return np.inf
            series = R ** -model.gamma + R ** (1.0 - model.gamma) / (model.gamma - 1.0)
            worst += 2.0 / np.pi * mass * sup * series
        n_obs = max(1, PointSetChecks.max_ball_count(roots.points()))
        return 10.0 * n_obs * worst

    @staticmethod
    def slice_mass(model: SectorModel, alpha: complex, beta: complex, theta: Sequence[complex], lam: float,
                   H_alpha: HarmonicWeight, H_beta: HarmonicWeight, epsilon: float = 0.05,
                   t_max: Optional[float] = None, step: float = SCAN_STEP) -> SliceMass:
        """Sum over roots of H_alpha(zeta) H_beta(zcheck), with the truncation tail bound."""
        roots = IntersectionSolver.solve(model, alpha, beta, theta, lam, epsilon, t_max, step)
        if len(roots) == 0:
            value = 0.0
        else:
            value = float(np.sum(H_alpha.sector_value(model, roots.zeta) * H_beta.sector_value(model, roots.zcheck)))
        return SliceMass(value, IntersectionSolver.slice_tail_bound(model, roots, H_alpha, H_beta), roots)
