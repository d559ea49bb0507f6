"""Exception hierarchy for the energy transport lab."""

from __future__ import annotations

import json
from typing import Any

import numpy as np


class LabError(Exception):
    """Base class for all errors raised by the lab."""


class ConfigError(LabError):
    """Configuration file missing, unreadable or failing validation."""


class GraphError(LabError):
    """Interaction graph cannot be built or is malformed."""


class CoefficientError(LabError):
    """Coefficient inputs outside their domain or a precondition fails."""


class PositivityError(LabError):
    """An integration step kept producing nonpositive energies.

    Raised after the maximum number of step halvings; carries the state
    that could not be advanced so the failure can be reproduced.
    """

    def __init__(self, message: str, *, state: np.ndarray, time: float, dt: float, halvings: int):
        super().__init__(message)
        self.state = np.array(state, dtype=float, copy=True)
        self.time = float(time)
        self.dt = float(dt)
        self.halvings = int(halvings)

    def dump(self) -> dict[str, Any]:
        return {
            "message": str(self),
            "time": self.time,
            "dt": self.dt,
            "halvings": self.halvings,
            "state": self.state.tolist(),
        }

    def __str__(self) -> str:
        base = super().__str__()
        return f"{base} (t={self.time:.6g}, dt={self.dt:.3g}, halvings={self.halvings}, state={json.dumps(self.state.tolist())})"


class FundamentalDomainError(LabError):
    """Reduction into the fundamental domain did not terminate."""


class MicroIntegrationError(LabError):
    """Microscopic integration became unstable or was misconfigured."""


class CorrelationError(LabError):
    """A correlation estimate could not be formed (no decay, bad mean)."""


class VerificationError(LabError):
    """A verification experiment cannot run with the given inputs."""
