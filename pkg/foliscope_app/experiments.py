# foliscope_app/experiments.py

import platform
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from .artifacts import ArtifactWriter
from .config import EXPERIMENTS, ExperimentConfig
from .current_field import AtlasMeasure, CurrentBuilder, CurrentField, GridMeasure, SampleCloudCurrent
from .density_lab import DensityLab, DiagonalFrame, YoungOperator
from .errors import FoliscopeError, UnknownExperiment
from .foliation_model import FoliationModel, FoliationSpec
from .intersection_solver import IntersectionSolver, PointSetChecks
from .leaf_tracer import AveragingReport, LeafTracer
from .local_current import LocalCurrentBuilder
from .logger import AppLogger
from .singularity_lab import HarmonicWeight, SectorAnalysis, SectorModel
from .surface_atlas import ChartWindow, SurfacePoint
from .version import __app_name__, __version__

GRID_HEADER = ["grid", "i", "j", "mass"]
REGULAR_MARGIN = 0.05
LEMMA_ETAS = (1j, 1 + 1j, -1 + 2j)


@dataclass(frozen=True)
class CheckSizes:
    """Case counts of the lemma-check suites."""
    lelong_currents: int
    nevanlinna_samples: int
    brownian_steps: int
    g_step: float
    residual_cases: int
    sparse_pairs: int
    aa_cases: int
    slice_mu: int
    slice_pairs: int
    young_resolutions: Tuple[int, int]
    young_trials: int


FULL_CHECKS = CheckSizes(20, 20000, 200_000, 0.25, 100, 8, 50, 64, 16, (128, 256), 100)
QUICK_CHECKS = CheckSizes(5, 4000, 20_000, 1.0, 10, 2, 8, 16, 4, (64, 128), 10)


@dataclass
class ExperimentResult:
    """Container for an experiment run."""
    experiment: str
    output_dir: str
    manifest: str
    artifacts: List[str] = field(default_factory=list)
    summary: Dict[str, Any] = field(default_factory=dict)
    skipped_shards: int = 0

    def to_json(self) -> Dict[str, Any]:
        return {"status": "ok", "experiment": self.experiment, "output_dir": self.output_dir,
                "manifest": self.manifest, "artifacts": self.artifacts,
                "skipped_shards": self.skipped_shards, "summary": self.summary}


class ExperimentRunner:
    """Runs one configured experiment and writes its artifacts and manifest."""

    def __init__(self, config: ExperimentConfig, progress_callback: Optional[Callable[[str], None]] = None):
        self.config = config
        self.progress_callback = progress_callback
        self.logger = AppLogger.get_logger(__name__)
        self.output_dir = Path(config.output_dir)
        self.manifest_path = self.output_dir / "manifest.json"
        self.config_hash = config.config_hash()
        self.finished = ArtifactWriter.completed_shards(self.manifest_path, self.config_hash) \
            if config.resume else set()
        self.completed: List[str] = []
        self.artifacts: List[str] = []
        self.skipped = 0
        self.started = ""

    def run(self) -> ExperimentResult:
        """Execute the configured experiment."""
        handlers = {
            "trace": self._trace,
            "nevanlinna": self._nevanlinna,
            "brownian": self._brownian,
            "density": self._density,
            "sector-lab": self._sector_lab,
            "lemma-check": self._lemma_check,
            "unique-ergodicity": self._unique_ergodicity,
        }
        command = self.config.command
        if command not in EXPERIMENTS or command not in handlers:
            raise UnknownExperiment(command)

        self.started = datetime.now(timezone.utc).isoformat()
        clock = time.perf_counter()
        try:
            self._update_progress(f"Running {command} (config {self.config_hash[:12]})...")
            summary = handlers[command]()
            self._record(ArtifactWriter.write_json(self.output_dir / "summary.json", summary))
            self._write_manifest(time.perf_counter() - clock)
            self._update_progress(f"{command} complete: {len(self.artifacts)} artifacts in {self.output_dir}")
            return ExperimentResult(command, str(self.output_dir), str(self.manifest_path),
                                    list(self.artifacts), summary, self.skipped)
        except FoliscopeError as e:
            self.logger.error(f"{command} failed: {e}")
            raise

    def _update_progress(self, message: str):
        if self.progress_callback:
            self.progress_callback(message)
        self.logger.info(message)

    def _shard_progress(self, done: int, total: int):
        self.logger.debug(f"shard {done}/{total} finished")

    def _record(self, path: str) -> str:
        name = Path(path).name
        if name not in self.artifacts:
            self.artifacts.append(name)
        return path

    def _write_manifest(self, wall_time: Optional[float]):
        payload = {
            "app": __app_name__,
            "version": __version__,
            "experiment": self.config.command,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "versions": {"python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__},
            "started": self.started,
            "wall_time": wall_time,
            "completed_shards": sorted(self.completed),
            "artifacts": sorted(self.artifacts),
        }
        ArtifactWriter.write_manifest(self.manifest_path, payload)

    def _shard_done(self, key: str):
        self.completed.append(key)
        self._write_manifest(None)

    # Shared helpers
    def _foliation(self) -> FoliationSpec:
        return FoliationModel.load(self.config.foliation)

    def _window(self) -> Optional[ChartWindow]:
        if self.config.window is None:
            return None
        chart, cx, cy, radius = self.config.window_spec
        return ChartWindow(chart, (cx, cy), radius)

    def _regular_points(self, F: FoliationSpec, count: int, rng: np.random.Generator) -> List[SurfacePoint]:
        """Random starting points at distance >= REGULAR_MARGIN from every singularity."""
        points: List[SurfacePoint] = []
        for _ in range(1000 * count):
            if len(points) == count:
                break
            if F.is_local:
                p = SurfacePoint.pinned(0.8 * (rng.random(2) - 0.5) + 0.8j * (rng.random(2) - 0.5), 0)
            else:
                p = SurfacePoint.from_homogeneous(rng.normal(size=3) + 1j * rng.normal(size=3))
            sing = F.singular_points(p.chart)
            if sing.size == 0 or np.min(np.linalg.norm(sing - p.vector[None, :], axis=1)) >= REGULAR_MARGIN:
                points.append(p)
        if len(points) < count:
            raise FoliscopeError(f"could not draw {count} regular starting points")
        return points

    def _start_point(self, F: FoliationSpec) -> SurfacePoint:
        if self.config.x0 is not None:
            return SurfacePoint.from_json(self.config.x0, pinned=F.is_local)
        return self._regular_points(F, 1, np.random.default_rng(self.config.seed))[0]

    @staticmethod
    def _grid_rows(grids: Sequence[GridMeasure]) -> List[Tuple[int, int, int, float]]:
        return [(g, i, j, m) for g, grid in enumerate(grids) for i, j, m in grid.rows()]

    @staticmethod
    def _grids_from_files(csv_path: Path, json_path: Path) -> Tuple[List[GridMeasure], Dict[str, Any]]:
        report = ArtifactWriter.read_json(json_path)
        windows = [ChartWindow.from_json(w) for w in report["windows"]]
        _, data = ArtifactWriter.read_csv(csv_path)
        resolution = int(report["resolution"])
        grids = []
        for g, window in enumerate(windows):
            masses = np.zeros((resolution, resolution))
            rows = data[data[:, 0] == g]
            masses[rows[:, 1].astype(int), rows[:, 2].astype(int)] = rows[:, 3]
            grids.append(GridMeasure(window, resolution, masses))
        return grids, report

    def _write_report(self, stem: str, report: AveragingReport) -> Dict[str, Any]:
        payload = dict(report.to_json(), resolution=self.config.grid)
        self._record(ArtifactWriter.write_csv(self.output_dir / f"{stem}.csv", GRID_HEADER,
                                              self._grid_rows(report.grids)))
        self._record(ArtifactWriter.write_json(self.output_dir / f"{stem}.json", payload))
        if self.config.heatmap:
            for g, grid in enumerate(report.grids):
                self._record(ArtifactWriter.write_pgm(self.output_dir / f"{stem}_grid{g}.pgm", grid.masses))
        return payload

    # Experiments
    def _trace(self) -> Dict[str, Any]:
        F = self._foliation()
        x0 = self._start_point(F)
        leaf = LeafTracer.integrate_leaf(F, x0, self.config.time_path)
        rows = []
        for t, p in zip(leaf.times, leaf.points):
            x1, x2 = p.affine
            rows.append((t.real, t.imag, p.chart, x1.real, x1.imag, x2.real, x2.imag))
        self._record(ArtifactWriter.write_csv(self.output_dir / "trace.csv",
                                              ["t_re", "t_im", "chart", "x1_re", "x1_im", "x2_re", "x2_im"], rows))
        return {"start": x0.to_json(), "endpoint": leaf.endpoint.to_json(), "steps": leaf.steps,
                "rejected": leaf.rejected, "chart_switches": leaf.chart_switches, "max_defect": leaf.max_defect}

    def _nevanlinna(self) -> Dict[str, Any]:
        F = self._foliation()
        x0 = self._start_point(F)
        report = LeafTracer.nevanlinna_average(F, x0, self.config.r, self.config.n_samples, self.config.seed,
                                               self.config.grid, self._window(), self.config.leaf_scale,
                                               self.config.jobs, self._shard_progress)
        return self._write_report("nevanlinna", report)

    def _brownian(self) -> Dict[str, Any]:
        F = self._foliation()
        x0 = self._start_point(F)
        report = LeafTracer.brownian_average(F, x0, self.config.steps, self.config.dt, self.config.seed,
                                             self.config.grid, self._window(), self.config.walkers,
                                             self.config.metric, self.config.jobs, self._shard_progress)
        return self._write_report("brownian", report)

    def _cloud(self, path: Optional[str], seed_seq: np.random.SeedSequence) -> SampleCloudCurrent:
        if path:
            return CurrentBuilder.load_csv(path)
        return CurrentBuilder.omega_cloud(self.config.cloud_size, np.random.default_rng(seed_seq))

    def _density(self) -> Dict[str, Any]:
        s1, s2 = np.random.SeedSequence(self.config.seed).spawn(2)
        T1 = self._cloud(self.config.t1, s1)
        T2 = self._cloud(self.config.t2, s2)
        if self.config.frame == "all":
            frames = None
        else:
            k = int(self.config.frame)
            frames = [DiagonalFrame(k, ChartWindow.unit(k), self.config.epsilon0, partition=True)]
        estimate = DensityLab.density_mass_estimate(T1, T2, self.config.lambda_schedule, frames,
                                                    pair_budget=self.config.pair_budget, seed=self.config.seed,
                                                    progress_callback=self._update_progress)
        self._record(ArtifactWriter.write_csv(self.output_dir / "density.csv",
                                              ["lambda", "theta", "error", "pairs"], estimate.rows()))
        ratio = DensityLab.mixed_mass_ratio(T1, T2, self.config.lambda_schedule[-1], frames) \
            if not T1.local else None
        return dict(estimate.to_json(), mixed_mass_ratio=ratio)

    def _sector_lab(self) -> Dict[str, Any]:
        model = SectorModel(self.config.eta_value)
        sub = {
            "lemma-axe-sum": self._lemma_axe_sum,
            "lemma-g-int": self._lemma_g_int,
            "lemma-diag": self._lemma_diag,
            "theta-slice": self._theta_slice,
            "roots": self._roots,
        }[self.config.experiment]
        summary = sub(model)
        return dict(summary, experiment=self.config.experiment, eta=[model.a, model.b], gamma=model.gamma)

    @staticmethod
    def _terminal_ratio(values: np.ndarray) -> float:
        top = float(np.max(values))
        return float(values[-1]) / top if top > 0.0 else 0.0

    def _lemma_axe_sum(self, model: SectorModel) -> Dict[str, Any]:
        H = HarmonicWeight.default_family(model)
        rows = []
        for s in self.config.s_grid:
            part = SectorAnalysis.axe_sum(model, H, s)
            rows.append((s, part.value, part.tail))
        self._record(ArtifactWriter.write_csv(self.output_dir / "sector_axe_sum.csv", ["s", "value", "tail"], rows))
        values = np.array([r[1] for r in rows])
        return {"max": float(np.max(values)), "terminal_ratio": self._terminal_ratio(values)}

    def _lemma_g_int(self, model: SectorModel) -> Dict[str, Any]:
        H = HarmonicWeight.default_family(model)
        s_out = np.array(self.config.s_grid)
        ds = 0.25
        fine = np.arange(1, int(np.ceil(s_out.max() / ds)) + 1) * ds
        g = np.array([[SectorAnalysis.g_integral(model, H, branch, s).value for s in fine] for branch in (1, 2)])
        e = np.array([SectorAnalysis.cesaro_curve(fine, curve) for curve in g])
        rows = [(s, np.interp(s, fine, g[0]), np.interp(s, fine, g[1]),
                 np.interp(s, fine, e[0]), np.interp(s, fine, e[1])) for s in s_out]
        self._record(ArtifactWriter.write_csv(self.output_dir / "sector_g_int.csv",
                                              ["s", "g1", "g2", "e1", "e2"], rows))
        e_out = np.array([[r[3], r[4]] for r in rows])
        return {"max_expectation": e_out.max(axis=0).tolist(),
                "terminal_ratio": [self._terminal_ratio(e_out[:, 0]), self._terminal_ratio(e_out[:, 1])]}

    def _lemma_diag(self, model: SectorModel) -> Dict[str, Any]:
        H = HarmonicWeight.default_family(model)
        directions = list(SectorAnalysis.interior_directions(model, 9))
        q = model.q_direction / abs(model.q_direction)
        directions = sorted(directions + [q], key=lambda d: float(np.angle(d)))
        rows = []
        for d in directions:
            ray = SectorAnalysis.ray_integral(model, H, d)
            rows.append((float(np.angle(d)), ray.value, ray.tail))
        self._record(ArtifactWriter.write_csv(self.output_dir / "sector_diag.csv", ["angle", "value", "tail"], rows))
        return {"max_tail_ratio": float(max(r[2] / r[1] for r in rows if r[1] > 0.0)),
                "finite": bool(all(np.isfinite(r[1]) for r in rows))}

    def _theta_grid(self) -> np.ndarray:
        frame = DiagonalFrame(0, ChartWindow.unit(0), self.config.epsilon0)
        return frame.theta_grid(self.config.theta_count)

    def _theta_slice(self, model: SectorModel) -> Dict[str, Any]:
        alphas, _ = LocalCurrentBuilder.synthesize_mu(model, self.config.mu_size, self.config.seed)
        curve = LocalCurrentBuilder.theta_slice_decay(model, self.config.s_grid, alphas, self._theta_grid(),
                                                      seed=self.config.seed, epsilon=self.config.epsilon,
                                                      jobs=self.config.jobs, progress_callback=self._shard_progress)
        self._record(ArtifactWriter.write_csv(self.output_dir / "sector_theta_slice.csv", ["s", "sup_theta"], curve))
        values = np.array([v for _, v in curve])
        return {"values": values.tolist(), "decay_ratio": float(values[-1] / values[0]) if values[0] > 0 else 0.0}

    def _roots(self, model: SectorModel) -> Dict[str, Any]:
        alphas, _ = LocalCurrentBuilder.synthesize_mu(model, max(2, self.config.mu_size), self.config.seed)
        alpha, beta = complex(alphas[0]), complex(alphas[1])
        theta = self._theta_grid()[0]
        aa = IntersectionSolver.aa_condition(model, alpha, beta, self.config.epsilon)
        rows = []
        for s in self.config.s_grid:
            if s <= 0.0:
                continue
            key = f"roots-{s:.6g}"
            dump = self.output_dir / f"roots_s{s:.6g}.json"
            if key in self.finished and dump.exists():
                roots_json = ArtifactWriter.read_json(dump)
                self.skipped += 1
                rows.append(tuple(roots_json["row"]))
                self._record(str(dump))
                self._shard_done(key)
                continue
            roots = IntersectionSolver.solve(model, alpha, beta, theta, float(np.exp(s)), self.config.epsilon)
            counts = [int(np.count_nonzero(roots.region == tag)) for tag in ("A", "B", "C")]
            a_part, c_part = roots.in_region("A"), roots.in_region("C")
            kappa_a = PointSetChecks.domination_distance(
                a_part.zeta, a_part.zcheck, IntersectionSolver.region_a_reference(model, s, aa))
            kappa_c = PointSetChecks.domination_distance(
                c_part.zeta, c_part.zcheck, IntersectionSolver.region_c_reference(model, s))
            row = (s, len(roots), *counts, PointSetChecks.max_ball_count(roots.points()),
                   kappa_a, kappa_c, roots.stalls, roots.dropped)
            self._record(ArtifactWriter.write_json(dump, {"row": list(row), "roots": roots.to_json()}))
            rows.append(row)
            self._shard_done(key)
        self._record(ArtifactWriter.write_csv(
            self.output_dir / "sector_roots.csv",
            ["s", "roots", "region_a", "region_b", "region_c", "n_obs", "kappa_a", "kappa_c", "stalls", "dropped"], rows))
        return {"alpha": [alpha.real, alpha.imag], "beta": [beta.real, beta.imag],
                "theta": [[t.real, t.imag] for t in theta], "aa_holds": aa.holds, "aa_delta": abs(aa.delta),
                "n_obs": [int(r[5]) for r in rows]}

    def _lemma_check(self) -> Dict[str, Any]:
        """Acceptance suites; each verdict lists the measured quantities.

        `quick` runs them at the reduced counts of QUICK_CHECKS.
        """
        sizes = QUICK_CHECKS if self.config.quick else FULL_CHECKS
        if self.config.quick:
            self.logger.warning("lemma-check runs at reduced case counts")
        rng = np.random.default_rng(self.config.seed)
        verdict = {"lelong": self._check_lelong(rng, sizes), "sector": self._check_sector(sizes),
                   "intersections": self._check_intersections(rng, sizes), "young": self._check_young(rng, sizes)}
        verdict["passed"] = all(v["passed"] for v in verdict.values())
        verdict["sizes"] = asdict(sizes)
        self._record(ArtifactWriter.write_json(self.output_dir / "lemma_check.json", verdict))
        return verdict

    def _check_lelong(self, rng: np.random.Generator, sizes: CheckSizes) -> Dict[str, Any]:
        a = np.array([0.1 + 0.05j, -0.2 + 0.1j])
        disc = CurrentBuilder.line_disc(a, [1.0, 0.5 + 0.5j], 0.5)
        center = SurfacePoint.pinned(a, 0)
        line_values = [CurrentField.lelong_indicator(disc, center, r) for r in (0.1, 0.2, 0.4)]
        violations = 0
        omega_drop = 0.0
        for _ in range(sizes.lelong_currents):
            cloud = CurrentBuilder.omega_cloud(4000, rng).in_chart(0)
            point = SurfacePoint.pinned(0.3 * (rng.normal(size=2) + 1j * rng.normal(size=2)), 0)
            values, sigmas = CurrentField.lelong_profile(cloud, point, [0.2, 0.4, 0.8])
            violations += int(np.sum(np.diff(values) < -3.0 * (sigmas[1:] + sigmas[:-1])))
            omega_drop = max(omega_drop, self._regular_lelong_drop(cloud, rng))

        F = self._foliation()
        x0 = self._regular_points(F, 1, rng)[0]
        seeds = np.random.SeedSequence(self.config.seed).spawn(2)
        outputs = {
            "nevanlinna": LeafTracer.nevanlinna_average(
                F, x0, self.config.r, sizes.nevanlinna_samples, int(seeds[0].generate_state(1)[0]),
                resolution=16, jobs=self.config.jobs, cloud_every=1).cloud,
            "brownian": LeafTracer.brownian_average(
                F, x0, sizes.brownian_steps, self.config.dt, int(seeds[1].generate_state(1)[0]),
                resolution=16, walkers=self.config.walkers, metric=self.config.metric,
                jobs=self.config.jobs, cloud_every=10).cloud,
        }
        drops = {name: self._regular_lelong_drop(cloud, rng) for name, cloud in outputs.items()}
        passed = all(abs(v - 1.0) <= 1e-3 for v in line_values) and violations == 0 and \
            omega_drop <= 0.1 and all(d <= 0.1 for d in drops.values())
        return {"passed": bool(passed), "line": line_values, "skoda_violations": violations,
                "currents": sizes.lelong_currents, "omega_drop": omega_drop, "regular_drop": drops}

    @staticmethod
    def _regular_lelong_drop(cloud: SampleCloudCurrent, rng: np.random.Generator, count: int = 10) -> float:
        """sum nu(r = 0.01) / sum nu(r = 0.1) at generic points 0.05 away from random samples."""
        if len(cloud) == 0:
            return 1.0
        picks = rng.choice(len(cloud), size=min(count, len(cloud)), replace=False)
        near = far = 0.0
        for k in picks:
            offset = rng.normal(size=2) + 1j * rng.normal(size=2)
            a = SurfacePoint.pinned(cloud.points[k] + 0.05 * offset / np.linalg.norm(offset), int(cloud.charts[k]))
            values, _ = CurrentField.lelong_profile(cloud, a, [0.01, 0.1])
            near += values[0]
            far += values[1]
        return near / far if far > 0.0 else 0.0

    def _check_sector(self, sizes: CheckSizes) -> Dict[str, Any]:
        details = {}
        passed = True
        fine = np.arange(1.0, 40.0 + 1e-9, sizes.g_step)
        for eta in LEMMA_ETAS:
            model = SectorModel(eta)
            H = HarmonicWeight.default_family(model)
            constant = float(np.max(np.abs(HarmonicWeight.constant(1.0).value(np.array([0.3 + 2j, -4 + 0.1j])) - 1.0)))
            mean_value = max(H.mean_value_residual(w, 0.5 * w.imag) for w in (2j, 1 + 3j, -2 + 2.5j))
            axe = np.array([SectorAnalysis.axe_sum(model, H, s).value for s in np.arange(1.0, 41.0, 3.0)])
            g_terminal = []
            for branch in (1, 2):
                g = np.array([SectorAnalysis.g_integral(model, H, branch, s).value for s in fine])
                g_terminal.append(self._terminal_ratio(SectorAnalysis.cesaro_curve(fine, g)))
            rays = [SectorAnalysis.ray_integral(model, H, d) for d in SectorAnalysis.interior_directions(model, 5)]
            tails = max(r.tail / r.value for r in rays)
            ok = constant <= 1e-10 and mean_value <= 1e-6 and tails <= 0.1 and \
                self._terminal_ratio(axe) <= 0.1 and max(g_terminal) <= 0.1
            passed &= ok
            details[str(eta)] = {"constant": constant, "mean_value": mean_value, "axe_terminal": self._terminal_ratio(axe),
                                 "g_terminal": g_terminal, "ray_tail_ratio": tails, "passed": bool(ok)}
        return {"passed": bool(passed), **details}

    def _check_intersections(self, rng: np.random.Generator, sizes: CheckSizes) -> Dict[str, Any]:
        model = SectorModel(1j)
        theta_grid = self._theta_grid()
        alphas, _ = LocalCurrentBuilder.synthesize_mu(model, 2 * sizes.residual_cases, self.config.seed)

        worst = 0.0
        for k in range(sizes.residual_cases):
            theta = theta_grid[rng.integers(len(theta_grid))]
            lam = float(np.exp(rng.uniform(3.0, 5.0)))
            roots = IntersectionSolver.solve(model, complex(alphas[2 * k]), complex(alphas[2 * k + 1]), theta, lam,
                                             self.config.epsilon)
            if len(roots):
                worst = max(worst, float(np.max(roots.residual)) / roots.scale)

        n_obs = []
        for k in range(sizes.sparse_pairs):
            alpha, beta = complex(alphas[2 * k]), complex(alphas[2 * k + 1])
            theta = theta_grid[k % len(theta_grid)]
            per_lambda = []
            for s in (3.0, 4.0, 5.0):
                roots = IntersectionSolver.solve(model, alpha, beta, theta, float(np.exp(s)), self.config.epsilon)
                per_lambda.append(PointSetChecks.max_ball_count(roots.points()))
            n_obs.append(per_lambda)
        stable = all(max(v) - min(v) <= 1 for v in n_obs)

        empty_a = True
        swept = 0
        for _ in range(50 * sizes.aa_cases):
            if swept == sizes.aa_cases:
                break
            alpha = complex(alphas[rng.integers(alphas.size)])
            beta = alpha * np.exp(1j * rng.uniform(0.5 * np.pi, 1.5 * np.pi))
            aa = IntersectionSolver.aa_condition(model, alpha, beta, self.config.epsilon)
            if aa.holds:
                continue
            swept += 1
            theta = theta_grid[rng.integers(len(theta_grid))]
            roots = IntersectionSolver.solve(model, alpha, beta, theta, float(np.exp(3.0)), self.config.epsilon)
            empty_a &= not np.any(roots.region == "A")

        mu_alphas, _ = LocalCurrentBuilder.synthesize_mu(model, sizes.slice_mu, self.config.seed)
        curve = LocalCurrentBuilder.theta_slice_decay(model, [1.0, 6.0], mu_alphas, theta_grid,
                                                      pair_count=sizes.slice_pairs, seed=self.config.seed,
                                                      epsilon=self.config.epsilon, jobs=self.config.jobs)
        start, end = curve[0][1], curve[-1][1]
        decay = end / start if start > 0.0 else 0.0

        passed = worst <= 1e-10 and stable and empty_a and swept == sizes.aa_cases and decay <= 0.3
        return {"passed": bool(passed), "worst_relative_residual": worst, "residual_cases": sizes.residual_cases,
                "n_obs": n_obs, "region_a_empty": bool(empty_a), "aa_cases": swept, "theta_slice_decay": decay}

    def _check_young(self, rng: np.random.Generator, sizes: CheckSizes) -> Dict[str, Any]:
        coarse, fine = sizes.young_resolutions
        bound = 1.05 * YoungOperator.BALL
        norms: Dict[str, List[float]] = {}
        refinement = 0.0
        for r in (0.05, 0.1, 0.2, 0.5):
            pair = [YoungOperator("convolution_r", resolution=n, r=r).norm_estimate(rng, trials=sizes.young_trials)
                    for n in (coarse, fine)]
            norms[str(r)] = pair
            refinement = max(refinement, abs(pair[1] - pair[0]) / pair[1])
        finest = [pair[1] for pair in norms.values()]
        return {"passed": bool(refinement <= 0.1 and max(finest) <= bound), "refinement": refinement,
                "bound": bound, "r_spread": (max(finest) - min(finest)) / max(finest),
                "resolutions": [coarse, fine], "norms": norms}

    def _unique_ergodicity(self) -> Dict[str, Any]:
        cfg = self.config
        F = self._foliation()
        starts = self._regular_points(F, cfg.starts, np.random.default_rng(cfg.seed))
        seeds = np.random.SeedSequence(cfg.seed).spawn(2 * cfg.starts)
        brownian: List[List[GridMeasure]] = []
        for i, x0 in enumerate(starts):
            brownian.append(self._averaging_shard(
                f"brownian-{i}", lambda x0=x0, i=i: LeafTracer.brownian_average(
                    F, x0, cfg.steps, cfg.dt, int(seeds[i].generate_state(1)[0]), cfg.grid, self._window(),
                    cfg.walkers, cfg.metric, cfg.jobs, self._shard_progress)))
            self._update_progress(f"Brownian run {i + 1}/{len(starts)} done")

        nevanlinna: List[List[GridMeasure]] = []
        for i, x0 in enumerate(starts[:min(3, len(starts))]):
            nevanlinna.append(self._averaging_shard(
                f"nevanlinna-{i}", lambda x0=x0, i=i: LeafTracer.nevanlinna_average(
                    F, x0, cfg.r, cfg.n_samples, int(seeds[cfg.starts + i].generate_state(1)[0]), cfg.grid,
                    self._window(), cfg.leaf_scale, cfg.jobs, self._shard_progress)))

        n = len(brownian)
        matrix = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                matrix[i, j] = matrix[j, i] = AtlasMeasure.l1_distance(brownian[i], brownian[j])
        consensus = AtlasMeasure.mean(brownian)
        cross = [AtlasMeasure.l1_distance(g, consensus) for g in nevanlinna]
        self._record(ArtifactWriter.write_csv(self.output_dir / "ue_l1_matrix.csv",
                                              [f"start{i}" for i in range(n)], matrix.tolist()))
        self._record(ArtifactWriter.write_csv(self.output_dir / "ue_cross.csv", ["start", "l1_to_consensus"],
                                              list(enumerate(cross))))
        self._record(ArtifactWriter.write_csv(self.output_dir / "ue_consensus.csv", GRID_HEADER,
                                              self._grid_rows(consensus)))
        worst = float(matrix.max()) if n > 1 else 0.0
        return {"starts": [p.to_json() for p in starts], "max_pairwise_l1": worst, "cross_l1": cross,
                "brownian_consistent": worst <= 0.05, "schemes_agree": bool(all(c <= 0.10 for c in cross))}

    def _averaging_shard(self, key: str, compute: Callable[[], AveragingReport]) -> List[GridMeasure]:
        """Run one averaging shard, or reload it when a previous run of this config finished it."""
        stem = f"ue_{key.replace('-', '_')}"
        csv_path, json_path = self.output_dir / f"{stem}.csv", self.output_dir / f"{stem}.json"
        if key in self.finished and csv_path.exists() and json_path.exists():
            grids, _ = self._grids_from_files(csv_path, json_path)
            self.skipped += 1
            self._record(str(csv_path))
            self._record(str(json_path))
            self.logger.info(f"shard {key} reused from a previous run")
        else:
            report = compute()
            self._write_report(stem, report)
            grids = report.grids
        self._shard_done(key)
        return grids
