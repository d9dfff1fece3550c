# foliscope_app/local_current.py

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import qmc

from .current_field import SampleCloudCurrent
from .errors import AtomDetected
from .intersection_solver import IntersectionSolver
from .logger import AppLogger
from .shard_pool import ShardPool
from .singularity_lab import HarmonicWeight, SectorAnalysis, SectorModel

logger = AppLogger.get_logger(__name__)

ATOM_SHARE = 0.05
P_MAX = 40.0

WeightFamily = Callable[[complex], HarmonicWeight]


@dataclass
class LocalCurrentModel:
    """T = sum_j mu_j T_{alpha_j}, each T_alpha = H_alpha [L_alpha] with unit mass in the bidisc."""
    model: SectorModel
    alphas: np.ndarray
    mu_weights: np.ndarray
    raw_masses: np.ndarray
    cloud: SampleCloudCurrent
    owner: np.ndarray

    def alpha_cloud(self, j: int) -> SampleCloudCurrent:
        return self.cloud.subset(self.owner == j)

    def alpha_masses(self) -> np.ndarray:
        """Euclidean mass of each T_alpha after normalization (1 up to rounding)."""
        masses = np.bincount(self.owner, weights=self.cloud.weights, minlength=self.alphas.size)
        return masses / self.mu_weights


class LocalCurrentBuilder:
    """Measures on the annulus of leaf parameters and the currents they carry."""

    @staticmethod
    def synthesize_mu(model: SectorModel, size: int = 64, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
        """Scrambled Sobol points in (log|alpha|, arg alpha) over e^{-2 pi b} < |alpha| <= 1, equal weights."""
        sampler = qmc.Sobol(d=2, scramble=True, seed=seed)
        u = sampler.random(size)
        log_modulus = -2.0 * np.pi * model.b * u[:, 0]
        alphas = np.exp(log_modulus + 2j * np.pi * u[:, 1])
        return alphas, np.full(size, 1.0 / size)

    @staticmethod
    def check_atoms(alphas: np.ndarray, mu_weights: np.ndarray):
        if alphas.size > 1:
            gaps = np.abs(alphas[:, None] - alphas[None, :])
            np.fill_diagonal(gaps, np.inf)
            if np.min(gaps) <= 0.0:
                raise AtomDetected("two parameter samples coincide")
        share = float(np.max(mu_weights) / np.sum(mu_weights))
        if share > ATOM_SHARE:
            raise AtomDetected(f"one parameter sample carries {share:.1%} of the measure")

    @staticmethod
    def _sector_samples(model: SectorModel, n: int, rng: np.random.Generator, p_max: float):
        """(p, q) in [0, p_max]^2 from an even mixture hugging the two axes, with the mixture density."""
        def trunc_exp(rate, size):
            return -np.log1p(-rng.random(size) * (1.0 - np.exp(-rate * p_max))) / rate

        def trunc_exp_pdf(rate, x):
            return rate * np.exp(-rate * x) / (1.0 - np.exp(-rate * p_max))

        first = rng.random(n) < 0.5
        p = np.where(first, rng.random(n) * p_max, trunc_exp(2.0, n))
        q = np.where(first, trunc_exp(2.0 * model.b, n), rng.random(n) * p_max)
        density = 0.5 * trunc_exp_pdf(2.0 * model.b, q) / p_max + 0.5 * trunc_exp_pdf(2.0, p) / p_max
        return p, q, density

    @staticmethod
    def assemble_local_current(model: SectorModel, alphas: Sequence[complex],
                               mu_weights: Optional[Sequence[float]] = None,
                               weights: Optional[WeightFamily] = None, samples_per_alpha: int = 2048,
                               seed: int = 0, check_atoms: bool = True, p_max: float = P_MAX) -> LocalCurrentModel:
        """Sample every leaf over the unit bidisc, weight by H_alpha and normalize each T_alpha to unit mass.

        On the leaf, |x1| = e^{-bq}, |x2| = e^{-p} and the Euclidean area element is
        (|eta|^2 e^{-2bq} + e^{-2p}) dp dq.
        """
        alphas = np.atleast_1d(np.asarray(alphas, dtype=complex))
        mu = np.full(alphas.size, 1.0 / alphas.size) if mu_weights is None else np.asarray(mu_weights, dtype=float)
        if check_atoms:
            LocalCurrentBuilder.check_atoms(alphas, mu)
        weights = weights or (lambda alpha: HarmonicWeight.default_family(model))
        seeds = ShardPool.spawn_seeds(seed, alphas.size)

        points, directions, sample_weights, owner, raw = [], [], [], [], []
        for j, (alpha, ss) in enumerate(zip(alphas, seeds)):
            rng = np.random.default_rng(ss)
            p, q, density = LocalCurrentBuilder._sector_samples(model, samples_per_alpha, rng, p_max)
            zeta = model.from_sector_coords(p, q)
            x1, x2 = model.leaf_point(alpha, zeta)
            element = abs(model.eta) ** 2 * np.exp(-2.0 * model.b * q) + np.exp(-2.0 * p)
            w = weights(alpha).sector_value(model, zeta) * element / (samples_per_alpha * density)
            keep = w > 0.0
            mass = float(np.sum(w[keep]))
            if mass <= 0.0:
                logger.warning(f"leaf alpha={alpha:.4g} carries no mass in the bidisc; skipped")
                continue
            d1, d2 = model.leaf_direction(x1[keep], x2[keep])
            points.append(np.column_stack([x1[keep], x2[keep]]))
            directions.append(np.column_stack([d1, d2]))
            sample_weights.append(w[keep] * mu[j] / mass)
            owner.append(np.full(int(np.count_nonzero(keep)), j))
            raw.append(mass)

        cloud = SampleCloudCurrent(0, np.vstack(points), np.concatenate(sample_weights),
                                   np.vstack(directions), local=True)
        logger.debug(f"local current: {len(cloud)} samples over {len(raw)} leaves")
        return LocalCurrentModel(model, alphas, mu, np.array(raw), cloud, np.concatenate(owner))

    @staticmethod
    def _slice_curve(task) -> np.ndarray:
        """Slice masses of one (alpha, beta, theta) over the s grid."""
        eta, alpha, beta, theta, s_grid, epsilon, step = task
        model = SectorModel(eta)
        H = HarmonicWeight.default_family(model)
        out = np.empty(len(s_grid))
        for i, s in enumerate(s_grid):
            out[i] = IntersectionSolver.slice_mass(model, alpha, beta, theta, float(np.exp(s)),
                                                   H, H, epsilon, step=step).value
        return out

    @staticmethod
    def theta_slice_decay(model: SectorModel, s_values: Sequence[float], alphas: np.ndarray,
                          thetas: np.ndarray, pair_count: int = 16, seed: int = 0, ds: float = 0.25,
                          epsilon: float = 0.05, step: float = 0.15, jobs: int = 1,
                          progress_callback: Optional[Callable[[int, int], None]] = None) -> List[Tuple[float, float]]:
        """sup over theta of the mu x mu average of the expected slice mass, for each s.

        The double integral is estimated on `pair_count` seeded pairs of parameter samples;
        expectations come from slice masses memoized on an s grid of spacing ds.
        """
        s_values = np.asarray(s_values, dtype=float)
        s_grid = np.arange(1, int(np.ceil(np.max(s_values) / ds)) + 1) * ds
        rng = np.random.default_rng(seed)
        pairs = rng.integers(0, alphas.size, size=(pair_count, 2))

        tasks = [(model.eta, complex(alphas[i]), complex(alphas[j]), theta, s_grid, epsilon, step)
                 for theta in thetas for i, j in pairs]
        pool = ShardPool(jobs, progress_callback)
        curves = np.array(pool.map(LocalCurrentBuilder._slice_curve, tasks))
        curves = curves.reshape(len(thetas), pair_count, s_grid.size)

        expected = np.array([[SectorAnalysis.cesaro_curve(s_grid, c) for c in per_theta] for per_theta in curves])
        averaged = expected.mean(axis=1)
        result = []
        for s in s_values:
            values = np.array([np.interp(s, s_grid, row) for row in averaged])
            result.append((float(s), float(np.max(values))))
        return result
