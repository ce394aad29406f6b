"""
Exception hierarchy for voltreach.

Every error raised on purpose by the package derives from VoltreachError so the
command-line entry point can map it onto an exit code.
"""

from typing import Optional


class VoltreachError(Exception):
    """Root of all voltreach errors."""


class ConfigError(VoltreachError, ValueError):
    """Invalid or unknown configuration values (carries dotted key paths)."""


class NonConvergenceError(VoltreachError, RuntimeError):
    """Newton-Raphson failed: too many iterations or a singular Jacobian."""

    def __init__(self, message: str, t: Optional[float] = None, iterations: int = 0,
                 residual: float = float("nan")):
        super().__init__(message)
        self.t = t
        self.iterations = iterations
        self.residual = residual

    def at(self, t: float) -> "NonConvergenceError":
        return NonConvergenceError(f"{self.args[0]} (t={t:.3f} s)", t=t,
                                   iterations=self.iterations, residual=self.residual)


class UnknownBranchError(VoltreachError, ValueError):
    """Branch name not in the network, or the branch is already out of service."""


class InfeasibleInitialConditionError(VoltreachError, ValueError):
    """No pre-disturbance steady state exists for the requested operating point."""


class GridCoverageError(VoltreachError, ValueError):
    """The DP grid does not cover the range reachable in one transition."""


class DimensionError(VoltreachError, ValueError):
    """Array shape does not match a network's declared dimensions."""


class TrainingAbort(VoltreachError, RuntimeError):
    """Training stopped; `reason` is machine readable (nan_loss, buffer_underflow, infeasible_start)."""

    def __init__(self, reason: str, detail: str = "", step: int = 0):
        super().__init__(f"training aborted: {reason} at step {step}: {detail}")
        self.reason = reason
        self.detail = detail
        self.step = step


class CheckpointFormatError(VoltreachError, ValueError):
    """Checkpoint file is missing, truncated or fails its checksum."""


class ValidationFailure(VoltreachError, AssertionError):
    """One or more invariant checks failed."""
