# foliscope_app/config.py

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from .errors import ConfigError
from .version import __app_name__, __version__

EXPERIMENTS = (
    "trace",
    "nevanlinna",
    "brownian",
    "density",
    "sector-lab",
    "lemma-check",
    "unique-ergodicity",
)

SECTOR_EXPERIMENTS = ("lemma-axe-sum", "lemma-g-int", "lemma-diag", "theta-slice", "roots")


@dataclass
class AppConfig:
    """Application configuration settings."""
    app_name: str = __app_name__
    version: str = __version__
    log_file: str = "foliscope.log"
    save_logs: bool = False
    log_level: str = "INFO"
    jobs_env_var: str = "FOLISCOPE_JOBS"


@dataclass
class ExperimentConfig:
    """Everything one CLI run needs; merged from flags, a JSON file and defaults."""
    command: str = ""
    foliation: str = "jouanolou:2"
    x0: Optional[Dict[str, Any]] = None
    path: str = "0,1j"
    r: float = 0.9
    n_samples: int = 20000
    leaf_scale: float = 1.0
    steps: int = 1_000_000
    dt: float = 1e-3
    walkers: int = 64
    metric: str = "omega"
    grid: int = 128
    window: Optional[str] = None
    heatmap: bool = False
    t1: Optional[str] = None
    t2: Optional[str] = None
    cloud_size: int = 20000
    frame: str = "all"
    lambda_schedule: List[float] = field(default_factory=lambda: [2.0, 4.0, 8.0, 16.0, 32.0])
    pair_budget: int = 10_000_000
    eta: str = "1j"
    experiment: str = "lemma-axe-sum"
    s_range: str = "1:40:1"
    epsilon: float = 0.05
    epsilon0: float = 0.1
    mu_size: int = 64
    theta_count: int = 3
    starts: int = 5
    quick: bool = False
    seed: Optional[int] = None
    jobs: Optional[int] = None
    output_dir: str = "foliscope_out"
    resume: bool = False

    @classmethod
    def merged(cls, cli: Dict[str, Any], config_file: Optional[str] = None,
               app: Optional[AppConfig] = None) -> "ExperimentConfig":
        """CLI flags > config file > defaults; jobs falls back to the environment."""
        app = app or AppConfig()
        known = {f.name for f in fields(cls)}
        values: Dict[str, Any] = {}

        if config_file:
            try:
                data = json.loads(Path(config_file).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config file {config_file}: {e}") from e
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
            unknown = sorted(set(data) - known)
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
            values.update(data)

        values.update({k: v for k, v in cli.items() if k in known and v is not None})

        if values.get("jobs") is None:
            load_dotenv()
            env_jobs = os.environ.get(app.jobs_env_var)
            if env_jobs:
                try:
                    values["jobs"] = int(env_jobs)
                except ValueError as e:
                    raise ConfigError(f"{app.jobs_env_var} must be an integer, got {env_jobs!r}") from e
            else:
                values["jobs"] = os.cpu_count() or 1

        cfg = cls(**values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        """Range checks; raises ConfigError on the first violation."""
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if not 0.0 < self.r < 1.0:
            raise ConfigError(f"r must lie in (0, 1), got {self.r}")
        if self.steps < 1 or self.n_samples < 1 or self.walkers < 1:
            raise ConfigError("steps, n_samples and walkers must be positive")
        if self.dt <= 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not 4 <= self.grid <= 4096:
            raise ConfigError(f"grid must lie in [4, 4096], got {self.grid}")
        if self.metric not in ("omega", "flow"):
            raise ConfigError(f"metric must be 'omega' or 'flow', got {self.metric!r}")
        schedule = list(self.lambda_schedule)
        if not schedule or any(lam < 1.0 for lam in schedule) or any(
                b <= a for a, b in zip(schedule, schedule[1:])):
            raise ConfigError("lambda schedule must be strictly increasing with every value >= 1")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 < self.epsilon0 <= 0.3:
            raise ConfigError(f"epsilon0 must lie in (0, 0.3], got {self.epsilon0}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if self.experiment not in SECTOR_EXPERIMENTS:
            raise ConfigError(f"unknown sector experiment {self.experiment!r}")
        if self.eta_value.imag <= 0.0:
            raise ConfigError(f"eta must have positive imaginary part, got {self.eta}")
        self.s_grid  # parses
        if self.window is not None:
            self.window_spec

    @property
    def eta_value(self) -> complex:
        try:
            return complex(str(self.eta).replace(" ", "").replace("i", "j"))
        except ValueError as e:
            raise ConfigError(f"cannot parse eta {self.eta!r}") from e

    @property
    def s_grid(self) -> List[float]:
        try:
            lo, hi, step = (float(p) for p in self.s_range.split(":"))
        except ValueError as e:
            raise ConfigError(f"s-range must be lo:hi:step, got {self.s_range!r}") from e
        if step <= 0.0 or hi < lo or lo < 0.0:
            raise ConfigError(f"invalid s-range {self.s_range!r}")
        count = int(round((hi - lo) / step)) + 1
        return [lo + i * step for i in range(count)]

    @property
    def window_spec(self) -> Tuple[int, complex, complex, float]:
        """Parse 'chart:cx,cy,radius' (cx, cy complex literals)."""
        try:
            chart_part, rest = str(self.window).split(":", 1)
            cx, cy, radius = rest.split(",")
            parsed = (int(chart_part), complex(cx.replace("i", "j")),
                      complex(cy.replace("i", "j")), float(radius))
        except ValueError as e:
            raise ConfigError(f"window must be chart:cx,cy,radius, got {self.window!r}") from e
        if parsed[0] not in (0, 1, 2) or parsed[3] <= 0.0:
            raise ConfigError(f"invalid window {self.window!r}")
        return parsed

    @property
    def time_path(self) -> List[complex]:
        try:
            return [complex(p.strip().replace("i", "j")) for p in self.path.split(",")]
        except ValueError as e:
            raise ConfigError(f"cannot parse time path {self.path!r}") from e

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """sha256 of the canonical JSON, ignoring where and whether output is resumed."""
        payload = {k: v for k, v in self.to_dict().items() if k not in ("output_dir", "resume", "jobs")}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
