# foliscope_app/integrator.py

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .foliation_model import FoliationSpec
from .logger import AppLogger
from .surface_atlas import SurfaceAtlas

logger = AppLogger.get_logger(__name__)

RUNNING, DONE, SINGULAR, UNDERFLOW, ESCAPED = 0, 1, 2, 3, 4


@dataclass
class FlowOutcome:
    """End state of an ensemble flow plus integrator statistics."""
    points: np.ndarray
    charts: np.ndarray
    status: np.ndarray
    steps: int
    rejected: int
    chart_switches: int
    max_defect: float

    @property
    def ok(self) -> np.ndarray:
        return self.status == DONE


class EnsembleFlow:
    """Dormand-Prince 5(4) pair run over a batch of leaves, each with its own step size.

    Every walker solves dx/dt = i * c * v(x) on t in [0, 1], where c is its complex time
    increment, so the endpoint is the leaf point reached after complex time c. Leaves are
    parametrized by i*v, which makes the linear normal form read (a e^{i eta t}, e^{i t}).
    """

    C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
    A = [
        np.array([]),
        np.array([1 / 5]),
        np.array([3 / 40, 9 / 40]),
        np.array([44 / 45, -56 / 15, 32 / 9]),
        np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
        np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    ]
    B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
    E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
    # quartic continuous extension
    P = np.array([
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ])

    def __init__(self, foliation: FoliationSpec, rtol: float = 1e-10, atol: float = 1e-12,
                 first_step: float = 0.1, min_step: float = 1e-10, max_steps: int = 20000,
                 rechart_above: float = 1.5, singular_cutoff: float = 1e-3,
                 escape_radius: float = 1e6, check_defect: bool = False):
        self.foliation = foliation
        self.rtol = rtol
        self.atol = atol
        self.first_step = first_step
        self.min_step = min_step
        self.max_steps = max_steps
        self.rechart_above = rechart_above
        self.singular_cutoff = singular_cutoff
        self.escape_radius = escape_radius
        self.check_defect = check_defect
        self._singular = {k: foliation.singular_points(k) for k in foliation.charts}

    def _rhs(self, x: np.ndarray, charts: np.ndarray, coeff: np.ndarray) -> np.ndarray:
        return (1j * coeff)[:, None] * self.foliation.eval_affine(x, charts)

    def _near_singularity(self, x: np.ndarray, charts: np.ndarray) -> np.ndarray:
        near = np.zeros(x.shape[0], dtype=bool)
        for k, pts in self._singular.items():
            if pts.size == 0:
                continue
            m = charts == k
            if not np.any(m):
                continue
            d = np.linalg.norm(x[m][:, None, :] - pts[None, :, :], axis=2)
            near[m] = np.min(d, axis=1) < self.singular_cutoff
        return near

    def run(self, points: np.ndarray, charts: np.ndarray, coeff: np.ndarray,
            first_step: Optional[float] = None) -> FlowOutcome:
        x = np.array(np.atleast_2d(points), dtype=complex)
        charts = np.array(charts, dtype=int).reshape(-1)
        coeff = np.asarray(coeff, dtype=complex).reshape(-1)
        n = x.shape[0]
        t = np.zeros(n)
        h = np.full(n, self.first_step if first_step is None else first_step)
        status = np.full(n, RUNNING)
        status[self._near_singularity(x, charts)] = SINGULAR
        walker_steps = np.zeros(n, dtype=int)
        f = self._rhs(x, charts, coeff)
        steps = rejected = switches = 0
        max_defect = 0.0

        while True:
            act = np.flatnonzero(status == RUNNING)
            if act.size == 0:
                break
            hh = np.minimum(h[act], 1.0 - t[act])
            xa, ca, cc = x[act], charts[act], coeff[act]
            K = np.empty((7,) + xa.shape, dtype=complex)
            K[0] = f[act]
            for s in range(1, 6):
                dy = np.tensordot(self.A[s], K[:s], axes=1) * hh[:, None]
                K[s] = self._rhs(xa + dy, ca, cc)
            x_new = xa + hh[:, None] * np.tensordot(self.B, K[:6], axes=1)
            K[6] = self._rhs(x_new, ca, cc)

            err_vec = hh[:, None] * np.tensordot(self.E, K, axes=1)
            scale = self.atol + self.rtol * np.maximum(np.abs(xa), np.abs(x_new))
            with np.errstate(invalid="ignore", over="ignore"):
                err = np.sqrt(np.mean(np.abs(err_vec / scale) ** 2, axis=1))
            finite = np.isfinite(err) & np.all(np.isfinite(x_new), axis=1)
            accept = finite & (err <= 1.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                factor = np.where(err == 0.0, 5.0, np.clip(0.9 * err ** -0.2, 0.2, 5.0))
            factor = np.where(finite, factor, 0.2)
            factor = np.where(accept, factor, np.minimum(factor, 1.0))

            steps += int(np.count_nonzero(accept))
            rejected += int(np.count_nonzero(~accept))

            if self.check_defect and np.any(accept):
                Q = np.einsum("snd,sj->ndj", K[:, accept], self.P)
                theta = 0.5
                powers = np.array([(j + 1) * theta ** j for j in range(4)])
                powers_y = np.array([theta ** (j + 1) for j in range(4)])
                ha = hh[accept]
                y_mid = xa[accept] + ha[:, None] * np.einsum("ndj,j->nd", Q, powers_y)
                dy_mid = np.einsum("ndj,j->nd", Q, powers)
                f_mid = self._rhs(y_mid, ca[accept], cc[accept])
                defect = np.linalg.norm(dy_mid - f_mid, axis=1) / np.maximum(
                    1.0, np.linalg.norm(f_mid, axis=1))
                max_defect = max(max_defect, float(np.max(defect * ha)))

            idx = act[accept]
            x[idx] = x_new[accept]
            f[idx] = K[6][accept]
            t[idx] += hh[accept]
            walker_steps[idx] += 1
            h[act] = hh * factor

            finished = idx[t[idx] >= 1.0 - 1e-14]
            status[finished] = DONE

            if not self.foliation.is_local and idx.size:
                far = idx[np.max(np.abs(x[idx]), axis=1) > self.rechart_above]
                if far.size:
                    x[far], new_charts = SurfaceAtlas.rechart(x[far], charts[far])
                    moved = new_charts != charts[far]
                    switches += int(np.count_nonzero(moved))
                    charts[far] = new_charts
                    f[far] = self._rhs(x[far], charts[far], coeff[far])
                    logger.debug(f"{int(np.count_nonzero(moved))} walkers changed chart")
            elif idx.size:
                escaped = idx[np.max(np.abs(x[idx]), axis=1) > self.escape_radius]
                status[escaped] = ESCAPED

            if idx.size:
                near = idx[self._near_singularity(x[idx], charts[idx])]
                status[near] = SINGULAR

            running = act[status[act] == RUNNING]
            stuck = (h[running] < self.min_step) & (1.0 - t[running] > self.min_step)
            status[running[stuck | (walker_steps[running] >= self.max_steps)]] = UNDERFLOW

        return FlowOutcome(x, charts, status, steps, rejected, switches, max_defect)
