# foliscope_app/leaf_tracer.py

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .current_field import AtlasMeasure, GridMeasure, SampleCloudCurrent
from .errors import DomainTooSingular, SingularApproach, StepUnderflow
from .foliation_model import FoliationSpec
from .integrator import DONE, ESCAPED, SINGULAR, UNDERFLOW, EnsembleFlow
from .logger import AppLogger
from .shard_pool import ShardPool
from .surface_atlas import ChartWindow, SurfaceAtlas, SurfacePoint

logger = AppLogger.get_logger(__name__)

SINGULAR_CUTOFF = 1e-3
TOL_ODE = 1e-9
ERROR_BATCHES = 16
NEVANLINNA_SHARD = 4096
BROWNIAN_SHARD_WALKERS = 16
MAX_ATTEMPTS = 50
SITE_MIN_ATTEMPTS = 20
SITE_SINGULAR_RATE = 0.9
MAX_SUBSTEPS = 64


@dataclass
class LeafPath:
    """Images of a complex-time polyline under the leaf flow through `base`."""
    base: SurfacePoint
    times: np.ndarray
    points: List[SurfacePoint]
    steps: int = 0
    rejected: int = 0
    chart_switches: int = 0
    max_defect: float = 0.0

    @property
    def endpoint(self) -> SurfacePoint:
        return self.points[-1]


@dataclass
class AveragingReport:
    """Output of a leafwise averaging run; grids are jointly normalized to mass 1."""
    scheme: str
    index: float
    characteristic: float
    grids: List[GridMeasure]
    samples: int
    statistical_error: float
    characteristic_error: float = 0.0
    singular_events: int = 0
    window_fraction: float = 1.0
    chart_switches: int = 0
    extras: Dict[str, Any] = field(default_factory=dict)
    cloud: Optional[SampleCloudCurrent] = None

    @property
    def grid(self) -> GridMeasure:
        return self.grids[0]

    def total_mass(self) -> float:
        return AtlasMeasure.total(self.grids)

    def l1_distance(self, other: "AveragingReport") -> float:
        return AtlasMeasure.l1_distance(self.grids, other.grids)

    def to_json(self) -> Dict[str, Any]:
        return {
            "scheme": self.scheme,
            "index": self.index,
            "characteristic": self.characteristic,
            "characteristic_error": self.characteristic_error,
            "samples": self.samples,
            "statistical_error": self.statistical_error,
            "singular_events": self.singular_events,
            "window_fraction": self.window_fraction,
            "chart_switches": self.chart_switches,
            "windows": [g.window.to_json() for g in self.grids],
            **self.extras,
        }


@dataclass
class _Layout:
    """Where occupation mass is binned: one explicit window or the three unit bidiscs."""
    windows: List[ChartWindow]
    resolution: int
    atlas: bool

    @classmethod
    def build(cls, F: FoliationSpec, window: Optional[ChartWindow], resolution: int) -> "_Layout":
        if window is not None:
            return cls([window], resolution, False)
        if F.is_local:
            return cls([ChartWindow.unit(0)], resolution, False)
        return cls([ChartWindow.unit(k) for k in range(3)], resolution, True)

    def inside(self, x: np.ndarray, charts: np.ndarray) -> np.ndarray:
        """Whether chart points lie in the binned region (always true for the atlas)."""
        if self.atlas:
            return np.ones(x.shape[0], dtype=bool)
        y, ok = _to_chart(x, charts, self.windows[0].chart)
        inside = np.zeros(x.shape[0], dtype=bool)
        inside[ok] = self.windows[0].contains(y[ok])
        return inside

    @property
    def site_count(self) -> int:
        """Grid cells plus one spare slot for points off the grid."""
        return len(self.windows) * self.resolution ** 2 + 1

    def sites(self, x: np.ndarray, charts: np.ndarray) -> np.ndarray:
        """Flat grid-cell index of each point."""
        n = self.resolution
        spare = self.site_count - 1
        keys = np.full(x.shape[0], spare)
        if self.atlas:
            y, best = SurfaceAtlas.rechart(x, charts)
            for k, win in enumerate(self.windows):
                m = np.flatnonzero(best == k)
                i, j = win.locate(y[m], n)
                keys[m] = np.where(i >= 0, (k * n + i) * n + j, spare)
        else:
            y, ok = _to_chart(x, charts, self.windows[0].chart)
            m = np.flatnonzero(ok)
            i, j = self.windows[0].locate(y[m], n)
            keys[m] = np.where(i >= 0, i * n + j, spare)
        return keys

    def reflect(self, F: FoliationSpec, x: np.ndarray, charts: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Increments with their outward part mirrored about the window boundary at x."""
        win = self.windows[0]
        tangent = 1j * F.eval_affine(x, charts)
        eps = 1e-7 / np.maximum(np.max(np.abs(tangent), axis=1), 1e-300)
        y, _ = _to_chart(x, charts, win.chart)
        y_ahead, _ = _to_chart(x + eps[:, None] * tangent, charts, win.chart)
        normal = win.time_normal(y, (y_ahead - y) / eps[:, None])
        outward = np.real(xi * np.conj(normal))
        return np.where(outward > 0.0, xi - 2.0 * outward * normal, xi)

    def accumulate(self, x: np.ndarray, charts: np.ndarray, weights: np.ndarray,
                   batch: np.ndarray, batches: int) -> np.ndarray:
        n = self.resolution
        out = np.zeros((batches, len(self.windows), n, n))
        if x.shape[0] == 0:
            return out
        if self.atlas:
            y, best = SurfaceAtlas.rechart(x, charts)
            for k, win in enumerate(self.windows):
                m = best == k
                _bin(out[:, k], win, y[m], weights[m], batch[m], n)
        else:
            win = self.windows[0]
            y, ok = _to_chart(x, charts, win.chart)
            _bin(out[:, 0], win, y[ok], weights[ok], batch[ok], n)
        return out


def _bin(target: np.ndarray, window: ChartWindow, y: np.ndarray, w: np.ndarray,
         batch: np.ndarray, n: int):
    i, j = window.locate(y, n)
    keep = i >= 0
    flat = (batch[keep] * n + i[keep]) * n + j[keep]
    cells = np.zeros(target.size)
    np.add.at(cells, flat, w[keep])
    target += cells.reshape(target.shape)


def _to_chart(x: np.ndarray, charts: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    y = np.zeros_like(x)
    ok = np.zeros(x.shape[0], dtype=bool)
    for j in np.unique(charts):
        m = np.flatnonzero(charts == j)
        X = SurfaceAtlas.lift(x[m], int(j))
        good = np.abs(X[:, k]) > 1e-12
        if np.any(good):
            y[m[good]] = SurfaceAtlas.project(X[good], k)
            ok[m[good]] = True
    return y, ok


def _batch_error(masses: np.ndarray) -> float:
    """One-sigma L1 error of the normalized total from batch-to-total scatter."""
    batches = masses.shape[0]
    total = masses.sum(axis=0)
    mass = total.sum()
    if batches < 2 or mass <= 0.0:
        return 0.0
    ref = total / mass
    dists = []
    for b in range(batches):
        mb = masses[b].sum()
        if mb > 0.0:
            dists.append(np.sum(np.abs(masses[b] / mb - ref)))
    if len(dists) < 2:
        return 0.0
    return float(np.mean(dists) / np.sqrt(batches - 1))


def crowded_sites(attempts: np.ndarray, hits: np.ndarray) -> np.ndarray:
    """Sites where more than 90% of enough increment attempts hit a singularity."""
    attempts = np.asarray(attempts)
    hits = np.asarray(hits)
    with np.errstate(divide="ignore", invalid="ignore"):
        rate = np.where(attempts > 0, hits / np.maximum(attempts, 1), 0.0)
    return np.flatnonzero((attempts >= SITE_MIN_ATTEMPTS) & (rate > SITE_SINGULAR_RATE))


def _visit_cloud(F: FoliationSpec, points: np.ndarray, charts: np.ndarray, areas: np.ndarray,
                 omega_time: bool = False) -> SampleCloudCurrent:
    """Samples carrying the Euclidean area of their leaf-time area elements."""
    v = F.eval_affine(points, charts)
    stretch = np.sum(np.abs(v) ** 2, axis=1)
    if omega_time:
        stretch /= np.maximum(SurfaceAtlas.omega_norm2(points, v), 1e-300)
    return SampleCloudCurrent(charts, points, areas * stretch, v, local=F.is_local)


def _gather_cloud(F: FoliationSpec, results: List[Dict[str, Any]], area: float,
                  omega_time: bool = False) -> SampleCloudCurrent:
    points = np.concatenate([res["cloud"][0] for res in results])
    if points.shape[0] == 0:
        return SampleCloudCurrent.empty(F.is_local)
    charts = np.concatenate([res["cloud"][1] for res in results])
    areas = np.concatenate([res["cloud"][2] for res in results]) * area
    return _visit_cloud(F, points, charts, areas, omega_time).normalize()


def _check_regular(F: FoliationSpec, x0: SurfacePoint):
    pts = F.singular_points(x0.chart)
    if pts.size and np.min(np.linalg.norm(pts - x0.vector[None, :], axis=1)) < SINGULAR_CUTOFF:
        raise SingularApproach(f"start point lies within {SINGULAR_CUTOFF} of a singularity")


def _make_point(F: FoliationSpec, x: np.ndarray, chart: int) -> SurfacePoint:
    return SurfacePoint.pinned(x, chart) if F.is_local else SurfacePoint.from_affine(x, chart)


def _start(F: FoliationSpec, x0: SurfacePoint) -> SurfacePoint:
    if F.is_local and x0.chart != 0:
        return SurfacePoint.pinned(x0.to_chart(0), 0)
    return x0


class LeafTracer:
    """Leaf integration and the two leafwise averaging schemes."""

    @staticmethod
    def integrate_leaf(F: FoliationSpec, x0: SurfacePoint, path: Sequence[complex],
                       rtol: float = 1e-11, atol: float = 1e-13) -> LeafPath:
        """Follow the leaf through x0 along a polyline of complex times starting at 0."""
        x0 = _start(F, x0)
        _check_regular(F, x0)
        times = np.asarray(list(path), dtype=complex)
        if times.size == 0 or times[0] != 0:
            times = np.concatenate([[0j], times])

        flow = EnsembleFlow(F, rtol=rtol, atol=atol, singular_cutoff=SINGULAR_CUTOFF, check_defect=True)
        x = x0.vector[None, :]
        chart = np.array([x0.chart])
        points = [x0]
        steps = rejected = switches = 0
        max_defect = 0.0
        for a, b in zip(times[:-1], times[1:]):
            if b == a:
                points.append(points[-1])
                continue
            out = flow.run(x, chart, np.array([b - a]))
            steps += out.steps
            rejected += out.rejected
            switches += out.chart_switches
            max_defect = max(max_defect, out.max_defect)
            status = int(out.status[0])
            if status == SINGULAR:
                raise SingularApproach(f"leaf came within {SINGULAR_CUTOFF} of a singularity near time {b}")
            if status == UNDERFLOW:
                raise StepUnderflow(f"step size underflow on segment {a} -> {b}")
            if status == ESCAPED:
                raise StepUnderflow(f"leaf left the local model's domain on segment {a} -> {b}")
            x, chart = out.points, out.charts
            points.append(_make_point(F, x[0], int(chart[0])))

        if switches:
            logger.debug(f"Leaf path changed chart {switches} times")
        if max_defect > TOL_ODE:
            logger.warning(f"Dense-output defect {max_defect:.3g} exceeds {TOL_ODE:g}")
        return LeafPath(x0, times, points, steps, rejected, switches, max_defect)

    @staticmethod
    def nevanlinna_average(F: FoliationSpec, x0: SurfacePoint, r: float, n_samples: int, seed: int,
                           resolution: int = 128, window: Optional[ChartWindow] = None,
                           leaf_scale: float = 1.0, jobs: int = 1,
                           progress_callback: Optional[Callable[[int, int], None]] = None,
                           cloud_every: int = 0) -> AveragingReport:
        """Log-weighted disc average through x0 pushed to the grid, with T(r).

        Disc points w with density proportional to log+(r/|w|) are sent to complex time
        leaf_scale * atanh(w); each carries the omega-area of the image of dA(w).
        With cloud_every = k > 0 every k-th disc sample is also kept as a sample cloud.
        """
        x0 = _start(F, x0)
        _check_regular(F, x0)
        if not 0.0 < r < 1.0:
            raise ValueError(f"index r must lie in (0, 1), got {r}")
        layout = _Layout.build(F, window, resolution)
        shards = int(np.ceil(n_samples / NEVANLINNA_SHARD))
        seeds = ShardPool.spawn_seeds(seed, shards)
        tasks = []
        for s in range(shards):
            lo = s * NEVANLINNA_SHARD
            tasks.append((F, x0.vector, x0.chart, r, leaf_scale, min(NEVANLINNA_SHARD, n_samples - lo),
                          seeds[s], lo, layout, cloud_every))
        results = ShardPool(jobs, progress_callback).map(_nevanlinna_shard, tasks)

        masses = ShardPool.tree_sum([res["masses"] for res in results])
        weight_sum = ShardPool.tree_sum([res["weight_sum"] for res in results])
        weight_sq = ShardPool.tree_sum([res["weight_sq"] for res in results])
        valid = int(sum(res["valid"] for res in results))
        singular = int(sum(res["singular"] for res in results))
        switches = int(sum(res["switches"] for res in results))
        if singular > 0.5 * n_samples:
            raise DomainTooSingular(f"{singular} of {n_samples} disc samples hit a singularity")
        if singular:
            logger.info(f"{singular} of {n_samples} disc samples dropped near singularities")
        if valid == 0:
            raise DomainTooSingular("no disc sample could be integrated")

        area = 0.5 * np.pi * r * r
        mean = weight_sum / valid
        var = max(weight_sq / valid - mean * mean, 0.0)
        total = masses.sum(axis=0)
        binned = float(total.sum())
        grids = AtlasMeasure.normalized([GridMeasure(w, resolution, total[k])
                                         for k, w in enumerate(layout.windows)])
        return AveragingReport(
            scheme="nevanlinna",
            index=r,
            characteristic=float(area * mean),
            grids=grids,
            samples=valid,
            statistical_error=_batch_error(masses.reshape(masses.shape[0], -1)),
            characteristic_error=float(area * np.sqrt(var / valid)),
            singular_events=singular,
            window_fraction=binned / weight_sum if weight_sum > 0 else 0.0,
            chart_switches=switches,
            extras={"leaf_scale": leaf_scale},
            cloud=_gather_cloud(F, results, area / valid * cloud_every) if cloud_every > 0 else None,
        )

    @staticmethod
    def brownian_average(F: FoliationSpec, x0: SurfacePoint, n_steps: int, dt: float, seed: int,
                         resolution: int = 128, window: Optional[ChartWindow] = None,
                         walkers: int = 64, metric: str = "omega", jobs: int = 1,
                         progress_callback: Optional[Callable[[int, int], None]] = None,
                         cloud_every: int = 0) -> AveragingReport:
        """Occupation measure of a leafwise random walk started at x0.

        With metric "omega" increments are normalized by the omega-length of the field, so
        the walk is chart independent and visit counts estimate T ^ omega; "flow" uses plain
        flow-time increments of variance dt. Moves leaving the window are reflected back
        into it in the leaf-time plane.
        With cloud_every = k > 0 every k-th visit of each walker is also kept as a sample cloud.
        """
        if metric not in ("omega", "flow"):
            raise ValueError(f"unknown metric {metric!r}")
        x0 = _start(F, x0)
        _check_regular(F, x0)
        layout = _Layout.build(F, window, resolution)
        if not layout.inside(x0.vector[None, :], np.array([x0.chart]))[0]:
            raise ValueError("start point lies outside the window")
        walkers = max(1, min(walkers, n_steps))
        per_walker = int(np.ceil(n_steps / walkers))
        shards = int(np.ceil(walkers / BROWNIAN_SHARD_WALKERS))
        seeds = ShardPool.spawn_seeds(seed, shards)
        tasks = []
        for s in range(shards):
            count = min(BROWNIAN_SHARD_WALKERS, walkers - s * BROWNIAN_SHARD_WALKERS)
            tasks.append((F, x0.vector, x0.chart, count, per_walker, dt, metric, seeds[s], layout, cloud_every))
        results = ShardPool(jobs, progress_callback).map(_brownian_shard, tasks)

        masses = ShardPool.tree_sum([res["masses"] for res in results])
        singular = int(sum(res["singular"] for res in results))
        held = int(sum(res["held"] for res in results))
        reflected = int(sum(res["reflected"] for res in results))
        switches = int(sum(res["switches"] for res in results))
        visits = walkers * per_walker
        if singular:
            logger.info(f"{singular} increments resampled near singularities")
        logger.debug(f"{reflected} of {visits} moves reflected at the window boundary, {held} held")
        total = masses.sum(axis=0)
        grids = AtlasMeasure.normalized([GridMeasure(w, resolution, total[k])
                                         for k, w in enumerate(layout.windows)])
        return AveragingReport(
            scheme="brownian",
            index=float(n_steps),
            characteristic=float(visits * dt),
            grids=grids,
            samples=visits,
            statistical_error=_batch_error(masses.reshape(masses.shape[0], -1)),
            singular_events=singular,
            window_fraction=float(total.sum()) / visits,
            chart_switches=switches,
            extras={"dt": dt, "metric": metric, "walkers": walkers, "held": held, "reflected": reflected},
            cloud=_gather_cloud(F, results, dt * cloud_every, metric == "omega") if cloud_every > 0 else None,
        )


def _nevanlinna_shard(task) -> Dict[str, Any]:
    F, x0, chart, r, scale, count, seed_seq, offset, layout, cloud_every = task
    rng = np.random.default_rng(seed_seq)
    rho = r * np.sqrt(rng.random(count) * rng.random(count))
    w = rho * np.exp(2j * np.pi * rng.random(count))
    zeta = scale * np.arctanh(w)

    flow = EnsembleFlow(F, singular_cutoff=SINGULAR_CUTOFF)
    out = flow.run(np.repeat(x0[None, :], count, axis=0), np.full(count, chart), zeta)
    ok = out.status == DONE
    v = F.eval_affine(out.points[ok], out.charts[ok])
    jac = np.abs(scale / (1.0 - w[ok] ** 2)) ** 2
    weight = SurfaceAtlas.omega_norm2(out.points[ok], v) * jac
    batch = (offset + np.flatnonzero(ok)) % ERROR_BATCHES
    masses = layout.accumulate(out.points[ok], out.charts[ok], weight, batch, ERROR_BATCHES)
    kept = np.zeros((0, 2), dtype=complex), np.zeros(0, dtype=int), np.zeros(0)
    if cloud_every > 0:
        keep = slice(None, None, cloud_every)
        kept = out.points[ok][keep], out.charts[ok][keep], jac[keep]
    return {
        "masses": masses,
        "weight_sum": float(np.sum(weight)),
        "weight_sq": float(np.sum(weight ** 2)),
        "valid": int(np.count_nonzero(ok)),
        "singular": int(np.count_nonzero(out.status == SINGULAR)),
        "switches": out.chart_switches,
        "cloud": kept,
    }


def _jacobian_norm(F: FoliationSpec, x: np.ndarray, charts: np.ndarray) -> np.ndarray:
    norms = np.zeros(x.shape[0])
    for k in np.unique(charts):
        m = charts == k
        norms[m] = np.linalg.norm(F.jacobian_affine(x[m], int(k)), axis=(1, 2))
    return norms


def _omega_speed(F: FoliationSpec, x: np.ndarray, charts: np.ndarray) -> np.ndarray:
    v = F.eval_affine(x, charts)
    return np.sqrt(np.maximum(SurfaceAtlas.omega_norm2(x, v), 1e-300))


def _brownian_shard(task) -> Dict[str, Any]:
    F, x0, chart, count, per_walker, dt, metric, seed_seq, layout, cloud_every = task
    rng = np.random.default_rng(seed_seq)
    flow = EnsembleFlow(F, rtol=1e-8, atol=1e-10, singular_cutoff=SINGULAR_CUTOFF)
    x = np.repeat(x0[None, :], count, axis=0)
    charts = np.full(count, chart)
    masses = np.zeros((ERROR_BATCHES, len(layout.windows), layout.resolution, layout.resolution))
    singular = held = reflected = switches = 0
    attempts = np.zeros(layout.site_count, dtype=int)
    hits = np.zeros(layout.site_count, dtype=int)
    block = 1024
    kept_x: List[np.ndarray] = []
    kept_c: List[np.ndarray] = []
    buffer_x = np.empty((block, count, 2), dtype=complex)
    buffer_c = np.empty((block, count), dtype=int)
    fill = 0

    def flush(upto: int, step_index: int):
        nonlocal masses
        if upto == 0:
            return
        steps = step_index - upto + np.arange(upto)
        batch = np.repeat((steps * ERROR_BATCHES) // per_walker, count)
        masses += layout.accumulate(buffer_x[:upto].reshape(-1, 2), buffer_c[:upto].reshape(-1),
                                    np.ones(upto * count), batch, ERROR_BATCHES)

    for step in range(per_walker):
        # split the increment where the field varies quickly against the step length
        scale = np.sqrt(dt) * _jacobian_norm(F, x, charts)
        if metric == "omega":
            scale /= _omega_speed(F, x, charts)
        substeps = np.clip(np.ceil((scale / 0.5) ** 2), 1, MAX_SUBSTEPS).astype(int)
        for sub in range(int(substeps.max())):
            act = np.flatnonzero(substeps > sub)
            sub_dt = dt / substeps[act]
            site = layout.sites(x[act], charts[act])
            proposal_x = x[act].copy()
            proposal_c = charts[act].copy()
            taken = np.zeros(act.size, dtype=complex)
            accepted = np.zeros(act.size, dtype=bool)
            for _ in range(MAX_ATTEMPTS):
                idx = np.flatnonzero(~accepted)
                if idx.size == 0:
                    break
                pending = act[idx]
                xi = np.sqrt(sub_dt[idx] / 2.0) * (rng.normal(size=idx.size) + 1j * rng.normal(size=idx.size))
                if metric == "omega":
                    xi /= _omega_speed(F, x[pending], charts[pending])
                out = flow.run(x[pending], charts[pending], xi, first_step=1.0)
                switches += out.chart_switches
                hit = out.status == SINGULAR
                singular += int(np.count_nonzero(hit))
                np.add.at(attempts, site[idx], 1)
                np.add.at(hits, site[idx[hit]], 1)
                crowded = crowded_sites(attempts, hits)
                if crowded.size:
                    s = int(crowded[0])
                    raise DomainTooSingular(
                        f"{hits[s]} of {attempts[s]} increments tried at grid site {s} hit a singularity")
                done = ~hit
                moved = done & (out.status == DONE)
                proposal_x[idx[moved]] = out.points[moved]
                proposal_c[idx[moved]] = out.charts[moved]
                taken[idx[moved]] = xi[moved]
                # failed or escaped moves stay put
                accepted[idx[done]] = True
            held += int(np.count_nonzero(~accepted))

            inside = layout.inside(proposal_x, proposal_c)
            out_idx = np.flatnonzero(~inside)
            if out_idx.size and not layout.atlas:
                pending = act[out_idx]
                xi = layout.reflect(F, x[pending], charts[pending], taken[out_idx])
                out = flow.run(x[pending], charts[pending], xi, first_step=1.0)
                back = (out.status == DONE) & layout.inside(out.points, out.charts)
                proposal_x[out_idx[back]] = out.points[back]
                proposal_c[out_idx[back]] = out.charts[back]
                inside[out_idx[back]] = True
                reflected += int(np.count_nonzero(back))
            held += int(np.count_nonzero(~inside))
            x[act[inside]] = proposal_x[inside]
            charts[act[inside]] = proposal_c[inside]

        buffer_x[fill] = x
        buffer_c[fill] = charts
        if cloud_every > 0 and step % cloud_every == 0:
            kept_x.append(x.copy())
            kept_c.append(charts.copy())
        fill += 1
        if fill == block:
            flush(fill, step + 1)
            fill = 0
    flush(fill, per_walker)
    kept = (np.concatenate(kept_x) if kept_x else np.zeros((0, 2), dtype=complex),
            np.concatenate(kept_c) if kept_c else np.zeros(0, dtype=int))
    return {"masses": masses, "singular": singular, "held": held, "reflected": reflected, "switches": switches,
            "cloud": (*kept, np.ones(kept[1].size))}
