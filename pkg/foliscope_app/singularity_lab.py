# foliscope_app/singularity_lab.py

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from .errors import BranchViolation, ConfigError, QuadratureFailure, TailBoundFailure
from .logger import AppLogger

logger = AppLogger.get_logger(__name__)

BRANCH_TOL = 1e-9
TAIL_RATIO = 0.1
MAX_CUTOFF = 1e8


@dataclass(frozen=True)
class HalfLine:
    """Segment start + l * direction for l in [0, length]; length inf is a half-line."""
    start: complex
    direction: complex
    length: float = np.inf

    def point(self, l):
        return self.start + np.asarray(l) * self.direction

    @property
    def end(self) -> complex:
        return self.point(self.length) if np.isfinite(self.length) else complex(np.inf, np.inf)

    def distance(self, zeta: np.ndarray) -> np.ndarray:
        zeta = np.asarray(zeta, dtype=complex)
        d2 = abs(self.direction) ** 2
        l = np.clip(np.real((zeta - self.start) * np.conj(self.direction)) / d2, 0.0, self.length)
        return np.abs(zeta - self.point(l))


@dataclass(frozen=True)
class SectorModel:
    """Hyperbolic local model x2 dx1 - eta x1 dx2 = 0 near (0, 0), eta = a + ib with b > 0.

    Leaves lift to the sector {v > 0, bu + av > 0} of zeta = u + iv through
    x = (alpha e^{i eta (zeta + log|alpha|/b)}, e^{i (zeta + log|alpha|/b)}).
    """
    eta: complex

    def __post_init__(self):
        if complex(self.eta).imag <= 0.0:
            raise ConfigError(f"eta must have positive imaginary part, got {self.eta}")
        object.__setattr__(self, "eta", complex(self.eta))

    @property
    def a(self) -> float:
        return self.eta.real

    @property
    def b(self) -> float:
        return self.eta.imag

    @property
    def angle(self) -> float:
        """Opening angle of the sector, in (0, pi)."""
        return float(np.arctan2(self.b, -self.a))

    @property
    def gamma(self) -> float:
        return np.pi / self.angle

    def flipped(self) -> "SectorModel":
        """Model of 1/conj(eta); `flip_point` carries its leaves onto leaves of this model."""
        return SectorModel(1.0 / np.conj(self.eta))

    @staticmethod
    def flip_point(y1, y2) -> Tuple[np.ndarray, np.ndarray]:
        return np.conj(y2), np.conj(y1)

    # Coordinates (p, q) = (v, (bu + av)/b) send the sector to the open quadrant
    def sector_coords(self, zeta) -> Tuple[np.ndarray, np.ndarray]:
        zeta = np.asarray(zeta, dtype=complex)
        return zeta.imag, zeta.real + self.a * zeta.imag / self.b

    def from_sector_coords(self, p, q) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return (np.asarray(q, dtype=float) - self.a * p / self.b) + 1j * p

    def contains(self, zeta, closed: bool = False, tol: float = 0.0) -> np.ndarray:
        p, q = self.sector_coords(zeta)
        if closed:
            return (p >= -tol) & (q >= -tol)
        return (p > tol) & (q > tol)

    def contains_prime(self, zeta) -> np.ndarray:
        """The enlarged sector {v > -log 3, bu + av > -log 3}."""
        zeta = np.asarray(zeta, dtype=complex)
        shift = -np.log(3.0)
        return (zeta.imag > shift) & (self.b * zeta.real + self.a * zeta.imag > shift)

    def leaf_point(self, alpha: complex, zeta) -> Tuple[np.ndarray, np.ndarray]:
        if alpha == 0:
            raise ValueError("alpha must be nonzero")
        w = np.asarray(zeta, dtype=complex) + np.log(abs(alpha)) / self.b
        return alpha * np.exp(1j * self.eta * w), np.exp(1j * w)

    def leaf_direction(self, x1, x2) -> Tuple[np.ndarray, np.ndarray]:
        """d(x1, x2)/d zeta along a leaf."""
        return 1j * self.eta * np.asarray(x1), 1j * np.asarray(x2)

    def tangency_residual(self, x1, x2, d1, d2) -> np.ndarray:
        """|x2 d1 - eta x1 d2| / (|x| |d|): zero exactly when (d1, d2) is tangent to the foliation."""
        x1, x2, d1, d2 = (np.asarray(v, dtype=complex) for v in (x1, x2, d1, d2))
        scale = np.sqrt(np.abs(x1) ** 2 + np.abs(x2) ** 2) * np.sqrt(np.abs(d1) ** 2 + np.abs(d2) ** 2)
        return np.abs(x2 * d1 - self.eta * x1 * d2) / np.maximum(scale, 1e-300)

    def _sector_arg(self, zeta: np.ndarray) -> np.ndarray:
        arg = np.angle(zeta)
        return np.where(arg < 0.5 * self.angle - np.pi, arg + 2.0 * np.pi, arg)

    def phi(self, zeta) -> np.ndarray:
        """zeta^gamma: the closed sector onto the closed upper half-plane, fixing R+."""
        zeta = np.asarray(zeta, dtype=complex)
        arg = self._sector_arg(zeta)
        outside = (np.abs(zeta) > 0.0) & ((arg < -BRANCH_TOL) | (arg > self.angle + BRANCH_TOL))
        if np.any(outside):
            bad = np.asarray(zeta)[outside].ravel()[0]
            raise BranchViolation(f"{bad} lies outside the sector of angle {self.angle:.6g}")
        arg = np.clip(arg, 0.0, self.angle)
        return np.abs(zeta) ** self.gamma * np.exp(1j * self.gamma * arg)

    def phi_inv(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=complex)
        arg = np.angle(w)
        arg = np.where(arg < -0.5 * np.pi, arg + 2.0 * np.pi, arg)
        outside = (np.abs(w) > 0.0) & ((arg < -BRANCH_TOL) | (arg > np.pi + BRANCH_TOL))
        if np.any(outside):
            bad = np.asarray(w)[outside].ravel()[0]
            raise BranchViolation(f"{bad} lies below the real axis")
        arg = np.clip(arg, 0.0, np.pi)
        return np.abs(w) ** (1.0 / self.gamma) * np.exp(1j * arg / self.gamma)

    # Distinguished half-lines
    def zeta_s(self, s: float) -> complex:
        return (1.0 - np.conj(self.eta)) * s / self.b

    def lambda_line(self, branch: int, s: float) -> HalfLine:
        """Lambda_1 = {Re(i zeta) + s = 0}, Lambda_2 = {Re(i eta zeta) + s = 0}, inside the sector."""
        if branch == 1:
            return HalfLine(-np.conj(self.eta) * s / self.b, 1.0 + 0j)
        if branch == 2:
            return HalfLine(complex(s / self.b), -np.conj(self.eta))
        raise ValueError(f"branch must be 1 or 2, got {branch}")

    def lambda_split(self, branch: int, s: float) -> Tuple[HalfLine, HalfLine]:
        """Lambda^0 (start to zeta_s) and Lambda^inf (zeta_s onwards); both meet at l = s/b."""
        line = self.lambda_line(branch, s)
        cut = s / self.b
        return HalfLine(line.start, line.direction, cut), HalfLine(line.point(cut), line.direction)

    def line_residual(self, branch: int, s: float, zeta) -> np.ndarray:
        zeta = np.asarray(zeta, dtype=complex)
        factor = 1j if branch == 1 else 1j * self.eta
        return np.real(factor * zeta) + s

    @property
    def q_direction(self) -> complex:
        return 1.0 - np.conj(self.eta)

    def q_line(self) -> HalfLine:
        return HalfLine(0j, self.q_direction)

    def q_tail(self, s: float) -> HalfLine:
        return HalfLine(self.zeta_s(s), self.q_direction)

    def q_residual(self, zeta) -> np.ndarray:
        return np.real(1j * (self.eta - 1.0) * np.asarray(zeta, dtype=complex))


@dataclass
class HarmonicWeight:
    """Positive harmonic function on the upper half-plane given by its boundary data.

    Boundary data: Cauchy atoms m/pi * sigma / (sigma^2 + (t - t_i)^2) (a Dirac mass when
    sigma = 0), a piecewise-linear density on `knots`, and a constant baseline.
    """
    atom_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atom_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    atom_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    knots: np.ndarray = field(default_factory=lambda: np.zeros(0))
    density: np.ndarray = field(default_factory=lambda: np.zeros(0))
    baseline: float = 0.0

    def __post_init__(self):
        self.atom_t = np.atleast_1d(np.asarray(self.atom_t, dtype=float))
        self.atom_m = np.atleast_1d(np.asarray(self.atom_m, dtype=float))
        sigma = np.asarray(self.atom_sigma, dtype=float)
        self.atom_sigma = np.zeros(self.atom_t.shape) if sigma.size == 0 else sigma.reshape(-1)
        self.knots = np.atleast_1d(np.asarray(self.knots, dtype=float))
        self.density = np.atleast_1d(np.asarray(self.density, dtype=float))
        if self.atom_m.shape != self.atom_t.shape or self.atom_sigma.shape != self.atom_t.shape:
            raise ConfigError("atom positions and masses differ in length")
        if np.any(self.atom_m <= 0.0) or np.any(self.atom_sigma < 0.0):
            raise ConfigError("atom masses must be positive and depths nonnegative")
        if self.knots.shape != self.density.shape or self.knots.size == 1:
            raise ConfigError("piecewise density needs matching knots and values, at least two")
        if np.any(np.diff(self.knots) <= 0.0) or np.any(self.density < 0.0):
            raise ConfigError("density knots must increase and values be nonnegative")
        if self.baseline < 0.0:
            raise ConfigError("baseline must be nonnegative")
        if self.atom_t.size == 0 and not np.any(self.density > 0.0) and self.baseline == 0.0:
            raise ConfigError("boundary data is identically zero")

    @classmethod
    def constant(cls, value: float = 1.0) -> "HarmonicWeight":
        return cls(baseline=value)

    @classmethod
    def default_family(cls, model: SectorModel, target: float = 1.0, sigma: float = 0.25) -> "HarmonicWeight":
        """Eight unit atoms at the images of the sector edge points at distances 0.5, 1, 2, 4.

        The common mass is scaled so that sum m_i |t_i|^(-1 + 1/gamma) = target. Atoms sit at
        depth sigma below the axis, which keeps sup_bound finite.
        """
        d = np.array([0.5, 1.0, 2.0, 4.0])
        t = np.concatenate([d ** model.gamma, -(d ** model.gamma)])
        masses = np.full(t.size, target / np.sum(np.abs(t) ** (-1.0 + 1.0 / model.gamma)))
        return cls(atom_t=t, atom_m=masses, atom_sigma=np.full(t.size, sigma))

    def scaled(self, factor: float) -> "HarmonicWeight":
        return HarmonicWeight(self.atom_t, self.atom_m * factor, self.atom_sigma, self.knots,
                              self.density * factor, self.baseline * factor)

    # Pieces y = A + B t of the piecewise density
    def _segments(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        t0, t1 = self.knots[:-1], self.knots[1:]
        slope = np.diff(self.density) / np.diff(self.knots)
        return t0, t1, self.density[:-1] - slope * t0, slope

    def boundary_density(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, self.baseline, dtype=float)
        if self.knots.size:
            out = out + np.interp(t, self.knots, self.density, left=0.0, right=0.0)
        for ti, mi, si in zip(self.atom_t, self.atom_m, self.atom_sigma):
            if si > 0.0:
                out = out + mi / np.pi * si / (si ** 2 + (t - ti) ** 2)
            else:
                out = np.where(t == ti, np.inf, out)
        return out

    def value(self, w) -> np.ndarray:
        """Poisson integral at points of the closed upper half-plane; boundary points return the density."""
        w = np.asarray(w, dtype=complex)
        U, V = w.real, w.imag
        if np.any(V < -BRANCH_TOL):
            raise BranchViolation("Poisson evaluation below the real axis")
        V = np.maximum(V, 0.0)
        interior = V > 0.0
        out = np.full(w.shape, self.baseline, dtype=float)

        with np.errstate(divide="ignore", invalid="ignore"):
            for ti, mi, si in zip(self.atom_t, self.atom_m, self.atom_sigma):
                h = V + si
                den = h ** 2 + (ti - U) ** 2
                term = np.where(den > 0.0, mi / np.pi * h / den, np.inf)
                out = out + term
            if self.knots.size:
                t0, t1, A, B = self._segments()
                Ue, Ve = U[..., None], np.where(interior, V, 1.0)[..., None]
                atan = np.arctan((t1 - Ue) / Ve) - np.arctan((t0 - Ue) / Ve)
                logs = np.log((Ve ** 2 + (t1 - Ue) ** 2) / (Ve ** 2 + (t0 - Ue) ** 2))
                piece = np.sum((A + B * Ue) * atan + 0.5 * B * Ve * logs, axis=-1) / np.pi
                edge = np.interp(U, self.knots, self.density, left=0.0, right=0.0)
                out = out + np.where(interior, piece, edge)
        return out

    def sector_value(self, model: SectorModel, zeta) -> np.ndarray:
        return self.value(model.phi(zeta))

    def sup_bound(self) -> float:
        """Upper bound of the boundary density on R, hence of the function."""
        if np.any(self.atom_sigma == 0.0):
            return np.inf
        total = self.baseline + float(np.sum(self.atom_m / (np.pi * self.atom_sigma)))
        return total + (float(np.max(self.density)) if self.knots.size else 0.0)

    def integrability(self, gamma: float) -> float:
        """Integral of the boundary density against |t|^(-1 + 1/gamma)."""
        if self.baseline > 0.0:
            return np.inf
        p = -1.0 + 1.0 / gamma
        total = 0.0
        for ti, mi, si in zip(self.atom_t, self.atom_m, self.atom_sigma):
            if si == 0.0:
                total += mi * abs(ti) ** p if ti != 0.0 else np.inf
                continue
            f = lambda t, ti=ti, si=si: si / (np.pi * (si ** 2 + (t - ti) ** 2)) * abs(t) ** p
            parts = [integrate.quad(f, -np.inf, -1.0), integrate.quad(f, -1.0, 0.0),
                     integrate.quad(f, 0.0, 1.0), integrate.quad(f, 1.0, np.inf)]
            total += mi * sum(v for v, _ in parts)
        if self.knots.size:
            f = lambda t: float(np.interp(t, self.knots, self.density)) * abs(t) ** p
            points = [k for k in self.knots if k != 0.0]
            lo, hi = float(self.knots[0]), float(self.knots[-1])
            pieces = sorted(set([lo, hi] + points + ([0.0] if lo < 0.0 < hi else [])))
            for x0, x1 in zip(pieces[:-1], pieces[1:]):
                total += integrate.quad(f, x0, x1, limit=200)[0]
        return total

    def mean_value_residual(self, w: complex, radius: float, n: int = 256) -> float:
        """|circle average - center value| / center value."""
        circle = w + radius * np.exp(2j * np.pi * np.arange(n) / n)
        center = float(self.value(np.array([w]))[0])
        return abs(float(np.mean(self.value(circle))) - center) / center

    def decay_data(self) -> Tuple[float, float]:
        """(total boundary mass, radius of the support including depths); mass inf with a baseline."""
        if self.baseline > 0.0:
            return np.inf, 0.0
        mass = float(np.sum(self.atom_m))
        radius = float(np.max(np.abs(self.atom_t) + self.atom_sigma)) if self.atom_t.size else 0.0
        if self.knots.size:
            mass += float(integrate.trapezoid(self.density, self.knots))
            radius = max(radius, float(np.max(np.abs(self.knots))))
        return mass, radius

    @staticmethod
    def kernel_ratio_bound(w1: complex, w2: complex) -> float:
        """sup over t of P(w1, t) / P(w2, t); bounds H(w1) / H(w2) for every positive H."""
        U1, V1, U2, V2 = w1.real, w1.imag, w2.real, w2.imag
        if V1 <= 0.0 or V2 <= 0.0:
            raise BranchViolation("kernel ratio needs interior points")

        def ratio(t):
            return (V1 / V2) * (V2 ** 2 + (t - U2) ** 2) / (V1 ** 2 + (t - U1) ** 2)

        # critical points of the ratio solve a quadratic in t
        c2 = U2 - U1
        c1 = -(U2 - U1) * (U1 + U2) + (V1 ** 2 - V2 ** 2)
        c0 = (U2 - U1) * U1 * U2 - V1 ** 2 * U2 + V2 ** 2 * U1
        if abs(c2) > 1e-14 * (abs(c1) + abs(c0) + 1.0):
            roots = np.roots([c2, c1, c0])
        elif abs(c1) > 0.0:
            roots = np.array([-c0 / c1])
        else:
            roots = np.zeros(0)
        candidates = [V1 / V2] + [ratio(r.real) for r in np.atleast_1d(roots) if abs(r.imag) < 1e-9 * (1 + abs(r))]
        return float(max(candidates))

    @staticmethod
    def harnack_constant(height: float = 2.0, distance: float = 1.0, n_angles: int = 721) -> float:
        """Worst kernel ratio over pairs at height >= `height` and distance <= `distance`.

        The ratio is invariant under real translations and positive dilations, so the
        lowest admissible point of the pair sits at `height` without loss.
        """
        base = 1j * height
        worst = 1.0
        for phi in np.linspace(0.0, np.pi, n_angles):
            other = base + distance * np.exp(1j * phi)
            worst = max(worst, HarmonicWeight.kernel_ratio_bound(base, other),
                        HarmonicWeight.kernel_ratio_bound(other, base))
        return worst


@dataclass
class LineIntegral:
    value: float
    tail: float
    cutoff: float

    @property
    def total_bound(self) -> float:
        return self.value + self.tail


class SectorAnalysis:
    """Expectations and half-line integrals of harmonic weights over the sector."""

    @staticmethod
    def expectation(f: Callable[[float], float], s: float, points: Optional[Sequence[float]] = None,
                    rtol: float = 1e-8) -> float:
        """Cesaro mean s^-1 int_0^s f."""
        if s <= 0.0:
            raise ValueError(f"s must be positive, got {s}")
        pts = [p for p in (points or []) if 0.0 < p < s] or None
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            result = integrate.quad(f, 0.0, s, points=pts, limit=400, epsabs=1e-14,
                                    epsrel=0.01 * rtol, full_output=1)
        value, abserr = result[0], result[1]
        if len(result) > 3 or not np.isfinite(value) or abserr > rtol * max(abs(value), 1e-300) + 1e-14:
            message = result[3] if len(result) > 3 else "error estimate too large"
            raise QuadratureFailure(f"expectation up to s={s:g} failed: {message} (error {abserr:.3g})")
        return value / s

    @staticmethod
    def cesaro_curve(s_values: np.ndarray, f_values: np.ndarray) -> np.ndarray:
        """Expectations on a sample grid s_0 < s_1 < ... from memoized values.

        f is held at f(s_0) on (0, s_0]; the rest is the cumulative trapezoid rule.
        """
        s_values = np.asarray(s_values, dtype=float)
        f_values = np.asarray(f_values, dtype=float)
        if s_values.size == 0:
            return s_values.copy()
        if s_values[0] <= 0.0 or np.any(np.diff(s_values) <= 0.0):
            raise ValueError("s grid must be positive and increasing")
        cumulative = integrate.cumulative_trapezoid(f_values, s_values, initial=0.0)
        return (s_values[0] * f_values[0] + cumulative) / s_values

    @staticmethod
    def _tail_bound(H: HarmonicWeight, model: SectorModel, line: HalfLine, cutoff: float) -> float:
        """Kernel decay bound on int_{l > cutoff} H(line(l)) dl; inf when not yet certified."""
        mass, radius = H.decay_data()
        if not np.isfinite(mass):
            return np.inf
        speed = abs(line.direction)
        reach = speed * cutoff - abs(line.start)
        if reach <= 0.0 or reach ** model.gamma < 2.0 * radius:
            return np.inf
        return 2.0 / np.pi * mass * reach ** (1.0 - model.gamma) / (speed * (model.gamma - 1.0))

    @staticmethod
    def line_integral(H: HarmonicWeight, model: SectorModel, line: HalfLine, l0: float = 0.0) -> LineIntegral:
        """int_{l >= l0} H(start + l * direction) dl, head by quadrature plus a certified tail."""
        def integrand(l):
            return float(H.sector_value(model, np.array([line.point(l)]))[0])

        head, cutoff = 0.0, l0
        edges = [l0]
        step = 1.0
        while True:
            nxt = edges[-1] + step
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", integrate.IntegrationWarning)
                piece, err = integrate.quad(integrand, edges[-1], nxt, limit=200, epsabs=1e-14, epsrel=1e-10)
            if err > 1e-6 * max(abs(piece), 1e-12):
                raise QuadratureFailure(f"head integral on [{edges[-1]:g}, {nxt:g}] did not converge")
            head += piece
            edges.append(nxt)
            cutoff = nxt
            step *= 2.0
            tail = SectorAnalysis._tail_bound(H, model, line, cutoff)
            if np.isfinite(tail) and (tail <= TAIL_RATIO * head or tail <= 1e-14):
                return LineIntegral(head, tail, cutoff)
            if cutoff >= MAX_CUTOFF:
                raise TailBoundFailure(f"tail bound {tail:.3g} exceeds {TAIL_RATIO:g} of head {head:.3g} "
                                       f"at cutoff {cutoff:.3g}")

    @staticmethod
    def g_integral(model: SectorModel, H: HarmonicWeight, branch: int, s: float) -> LineIntegral:
        """Integral of H along the half-line Lambda_branch at level s."""
        if s < 0.0:
            raise ValueError(f"s must be nonnegative, got {s}")
        return SectorAnalysis.line_integral(H, model, model.lambda_line(branch, s))

    @staticmethod
    def axe_sum(model: SectorModel, H: HarmonicWeight, s: float, hbar: float = 1.0, branch: int = 1) -> LineIntegral:
        """Integral of H along Lambda_branch at level s, from arc length hbar * s on."""
        line = model.lambda_line(branch, s)
        return SectorAnalysis.line_integral(H, model, line, l0=hbar * s / abs(line.direction))

    @staticmethod
    def ray_integral(model: SectorModel, H: HarmonicWeight, direction: complex) -> LineIntegral:
        if not bool(model.contains(np.array([direction]))[0]):
            raise BranchViolation(f"ray direction {direction} is not interior to the sector")
        return SectorAnalysis.line_integral(H, model, HalfLine(0j, complex(direction)))

    @staticmethod
    def interior_directions(model: SectorModel, count: int, margin: float = 0.05) -> np.ndarray:
        """A pencil of unit directions sweeping the sector's interior from R+ towards the far edge."""
        angles = np.linspace(margin, 1.0 - margin, count) * model.angle
        return np.exp(1j * angles)
