# foliscope_app/main.py

import argparse
import json
import logging
import sys
import traceback
from typing import Any, Dict, List, Optional

from .config import EXPERIMENTS, SECTOR_EXPERIMENTS, AppConfig, ExperimentConfig
from .errors import ConfigError, FoliscopeError, UnknownExperiment
from .experiments import ExperimentRunner
from .logger import AppLogger
from .version import __app_name__, __description__, __version__

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _emit(payload: Dict[str, Any]):
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    sys.stdout.flush()


class _UsageError(Exception):
    def __init__(self, message: str, code: str = "usage_error"):
        super().__init__(message)
        self.code = code


class JsonArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as JSON instead of printing help text."""

    def error(self, message: str):
        if "invalid choice" in message and ("argument command" in message or "--experiment" in message):
            raise _UsageError("unknown experiment", UnknownExperiment.code)
        raise _UsageError(message)


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> JsonArgumentParser:
    common = JsonArgumentParser(add_help=False)
    general = common.add_argument_group("general")
    general.add_argument("--config", help="JSON config file (flags override it)")
    general.add_argument("--seed", type=int)
    general.add_argument("--jobs", type=int, help="worker processes (default: FOLISCOPE_JOBS, then CPU count)")
    general.add_argument("--output-dir", dest="output_dir")
    general.add_argument("--resume", action="store_true", default=None,
                         help="skip shards a previous run of the same config finished")
    general.add_argument("--quick", action="store_true", default=None,
                         help="lemma-check at reduced case counts (documented in the summary)")
    general.add_argument("--log-level", dest="log_level", default="INFO")
    general.add_argument("--save-logs", dest="save_logs", action="store_true")

    leaf = common.add_argument_group("leaves and averaging")
    leaf.add_argument("--foliation", help="preset name (linear:eta=..., jouanolou:d, constant) or JSON file")
    leaf.add_argument("--x0", help='start point as JSON {"chart": k, "x": [re1, im1, re2, im2]}')
    leaf.add_argument("--path", help="comma separated complex times, e.g. 0,1j,1+1j")
    leaf.add_argument("--r", type=float)
    leaf.add_argument("--n-samples", dest="n_samples", type=int)
    leaf.add_argument("--leaf-scale", dest="leaf_scale", type=float)
    leaf.add_argument("--steps", type=int)
    leaf.add_argument("--dt", type=float)
    leaf.add_argument("--walkers", type=int)
    leaf.add_argument("--metric", choices=("omega", "flow"))
    leaf.add_argument("--grid", type=int)
    leaf.add_argument("--window", help="chart:cx,cy,radius")
    leaf.add_argument("--heatmap", action="store_true", default=None)
    leaf.add_argument("--starts", type=int)

    density = common.add_argument_group("density")
    density.add_argument("--t1", help="first cloud CSV (default: an omega cloud)")
    density.add_argument("--t2", help="second cloud CSV (default: an omega cloud)")
    density.add_argument("--cloud-size", dest="cloud_size", type=int)
    density.add_argument("--frame", help="'all' or a chart index")
    density.add_argument("--lambda-schedule", dest="lambda_schedule", type=_float_list)
    density.add_argument("--pair-budget", dest="pair_budget", type=int)

    sector = common.add_argument_group("sector")
    sector.add_argument("--eta", help="complex eta = a+bi with b > 0")
    sector.add_argument("--experiment", choices=SECTOR_EXPERIMENTS)
    sector.add_argument("--s-range", dest="s_range", help="lo:hi:step")
    sector.add_argument("--epsilon", type=float)
    sector.add_argument("--epsilon0", type=float)
    sector.add_argument("--mu-size", dest="mu_size", type=int)
    sector.add_argument("--theta-count", dest="theta_count", type=int)

    parser = JsonArgumentParser(prog="foliscope", description=__description__)
    parser.add_argument("--version", action="version", version=f"{__app_name__} {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    return parser


def _cli_values(args: argparse.Namespace) -> Dict[str, Any]:
    values = {k: v for k, v in vars(args).items()
              if k not in ("config", "log_level", "save_logs") and v is not None}
    if "x0" in values:
        try:
            values["x0"] = json.loads(values["x0"])
        except json.JSONDecodeError as e:
            raise ConfigError(f"--x0 must be JSON: {e}") from e
    return values


def main(argv: Optional[List[str]] = None) -> int:
    """Command line entry point; prints one JSON document on stdout."""
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as e:
        _emit({"error": str(e), "code": e.code})
        return USAGE_EXIT

    app = AppConfig(log_level=args.log_level, save_logs=bool(args.save_logs))
    AppLogger(app)
    try:
        config = ExperimentConfig.merged(_cli_values(args), args.config, app)
        result = ExperimentRunner(config).run()
        _emit(result.to_json())
        return 0

    except UnknownExperiment as e:
        _emit({"error": str(e), "code": e.code})
        return USAGE_EXIT

    except FoliscopeError as e:
        logging.error(f"{type(e).__name__}: {e}")
        _emit({"error": str(e), "code": e.code})
        return FAILURE_EXIT

    except Exception as e:
        logging.error(f"Critical error: {e}")
        logging.error(traceback.format_exc())
        _emit({"error": str(e), "code": "internal_error"})
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())
