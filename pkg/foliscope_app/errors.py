# foliscope_app/errors.py


class FoliscopeError(Exception):
    """Base class for lab failures; `code` is what the CLI reports."""
    code = "foliscope_error"


class ConfigError(FoliscopeError):
    code = "config_error"


class UnknownExperiment(FoliscopeError):
    code = "unknown_experiment"

    def __init__(self, name: str = ""):
        super().__init__("unknown experiment")
        self.name = name


# Geometry and foliation input
class ChartUndefined(FoliscopeError):
    code = "chart_undefined"


class SolverDiverged(FoliscopeError):
    code = "solver_diverged"


class TooCloseToSingularity(FoliscopeError):
    code = "too_close_to_singularity"


# Leaf integration and averaging
class SingularApproach(FoliscopeError):
    code = "singular_approach"


class StepUnderflow(FoliscopeError):
    code = "step_underflow"


class DomainTooSingular(FoliscopeError):
    code = "domain_too_singular"


# Currents and dilations
class GridMismatch(FoliscopeError):
    code = "grid_mismatch"


class FrameMismatch(FoliscopeError):
    code = "frame_mismatch"


class NonConvergent(FoliscopeError):
    code = "non_convergent"


class AtomDetected(FoliscopeError):
    code = "atom_detected"


# Sector machinery
class BranchViolation(FoliscopeError):
    code = "branch_violation"


class QuadratureFailure(FoliscopeError):
    code = "quadrature_failure"


class TailBoundFailure(FoliscopeError):
    code = "tail_bound_failure"


class NewtonStall(FoliscopeError):
    code = "newton_stall"
