"""Run configuration: pydantic models loaded from a JSON file.

Every section has defaults, so ``{}`` is a valid configuration. Unknown keys
are rejected. Environment variables only supply defaults for the output
directory, the worker count and the run ledger.
"""

from __future__ import annotations

import json
import os
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.errors import ConfigError
from app.lab.rng import SEED_MAX, digest_of

DEFAULT_OUTPUT_DIR = "runs"


class GraphKind(str, Enum):
    CHAIN = "chain"
    LATTICE = "lattice"
    COMPLETE = "complete"
    FILE = "file"


class _Section(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")


def _positive_energies(values: list[float]) -> list[float]:
    if not values:
        raise ValueError("at least one initial energy is required")
    for index, value in enumerate(values):
        if not value > 0:
            raise ValueError(f"initial energy {index} is {value}; initial energies must satisfy E_x > 0")
    return values


Energies = Annotated[list[float], AfterValidator(_positive_energies)]


class GraphConfig(_Section):
    kind: GraphKind = GraphKind.COMPLETE
    n: int = Field(2, ge=1)
    lattice_dim: int = Field(1, ge=1, alias="latticeDim")
    box: list[list[int]] | None = None
    path: str | None = None

    @model_validator(mode="after")
    def _check_kind(self) -> "GraphConfig":
        if self.kind is GraphKind.FILE and not self.path:
            raise ValueError("graph kind 'file' needs a path")
        if self.kind is GraphKind.LATTICE and self.box is None:
            raise ValueError("graph kind 'lattice' needs a box")
        return self


class CoefficientConfig(_Section):
    kind: Literal["analytic-model", "empirical-table"] = "analytic-model"
    A: float = Field(1.0, gt=0)
    B: float = Field(0.0, ge=0)
    D: float | None = None
    d: int = Field(3, ge=2)
    gamma_table: str | None = Field(None, alias="gammaTable")

    @model_validator(mode="after")
    def _check_table(self) -> "CoefficientConfig":
        if self.kind == "empirical-table" and not self.gamma_table:
            raise ValueError("kind 'empirical-table' needs gammaTable")
        return self


class SdeConfig(_Section):
    initial_energies: Energies = Field(default_factory=lambda: [1.0, 1.0], alias="initialEnergies")
    dt: float | None = Field(None, gt=0)
    t_end: float = Field(1.0, gt=0, alias="tEnd")
    delta_stop: float = Field(0.0, ge=0, alias="deltaStop")
    stop_cluster: int = Field(1, ge=1, alias="stopCluster")
    max_halvings: int = Field(40, ge=0, alias="maxHalvings")
    record_stride: int = Field(100, ge=1, alias="recordStride")
    ensemble: int = Field(1, ge=1)
    batch_size: int = Field(1000, ge=1, alias="batchSize")
    log_coords: bool = Field(False, alias="logCoords")
    cutoff_delta: float = Field(0.01, gt=0, lt=1, alias="cutoffDelta")


class MicroSection(_Section):
    backend: Literal["hyperbolic", "torus"] = "hyperbolic"
    potential: Literal["product-bump", "constant"] = "product-bump"
    bump_radius: float | None = Field(None, gt=0, alias="bumpRadius")
    epsilon: float = Field(0.1, gt=0)
    epsilon_max: float = Field(0.5, gt=0, alias="epsilonMax")
    delta: float = Field(0.05, gt=0, lt=1)
    initial_energies: Energies = Field(default_factory=lambda: [1.0, 1.0], alias="initialEnergies")
    h: float = Field(0.01, gt=0)
    t_slow: float = Field(0.5, gt=0, alias="tSlow")
    samples: int = Field(50, ge=1)
    ensemble: int = Field(1, ge=1)
    batch_size: int = Field(64, ge=1, alias="batchSize")
    epsilon_ladder: list[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05], alias="epsilonLadder")

    @field_validator("epsilon_ladder")
    @classmethod
    def _check_ladder(cls, values: list[float]) -> list[float]:
        if any(not v > 0 for v in values):
            raise ValueError("epsilonLadder entries must be positive")
        return values

    @model_validator(mode="after")
    def _check_bound(self) -> "MicroSection":
        if self.epsilon > self.epsilon_max:
            raise ValueError(f"epsilon {self.epsilon} exceeds epsilonMax {self.epsilon_max}")
        return self


class GreenKuboConfig(_Section):
    tau_min: float = Field(1.0 / 64.0, gt=0, alias="tauMin")
    tau_max: float = Field(64.0, gt=0, alias="tauMax")
    tau_points: int = Field(13, ge=2, alias="tauPoints")
    horizon: float = Field(12.0, gt=0)
    resolution: float = Field(0.05, gt=0)
    max_points: int = Field(4001, ge=8, alias="maxPoints")
    ensemble: int = Field(1000, ge=2)
    tail_from: float = Field(8.0, gt=0, alias="tailFrom")
    observable: Literal["zero", "cos1", "correlated", "coboundary"] = "cos1"
    lag_max: int = Field(50, ge=5, alias="lagMax")
    sigma_ensemble: int = Field(100_000, ge=2, alias="sigmaEnsemble")
    oracle_steps: int = Field(20_000, ge=1, alias="oracleSteps")
    oracle_ensemble: int = Field(4000, ge=2, alias="oracleEnsemble")

    @model_validator(mode="after")
    def _check_grid(self) -> "GreenKuboConfig":
        if self.tau_min >= self.tau_max:
            raise ValueError("tauMin must be below tauMax")
        return self


class VerifyConfig(_Section):
    beta: float = Field(1.0, gt=0)
    level: float = Field(0.01, gt=0, lt=1)
    confidence: float = Field(0.95, gt=0, lt=1)
    invariant_members: int = Field(2000, ge=2, alias="invariantMembers")
    invariant_t: float = Field(2.0, gt=0, alias="invariantT")
    invariant_dt: float = Field(1e-3, gt=0, alias="invariantDt")
    invariant_stride: int = Field(50, ge=1, alias="invariantStride")
    min_ess: int = Field(1000, ge=1, alias="minEss")
    calibration_n: int = Field(1000, ge=10, alias="calibrationN")
    calibration_repetitions: int = Field(1000, ge=10, alias="calibrationRepetitions")
    reversibility_samples: int = Field(1_000_000, ge=100, alias="reversibilitySamples")
    drift_grid: tuple[float, float, int] = Field((0.1, 10.0, 20), alias="driftGrid")
    fd_step: float = Field(1e-5, gt=0, alias="fdStep")
    hitting_energies: Energies = Field(default_factory=lambda: [1.0, 1.0], alias="hittingEnergies")
    hitting_t: float = Field(1.0, gt=0, alias="hittingT")
    hitting_deltas: list[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4], alias="hittingDeltas")
    hitting_ensemble: int = Field(10_000, ge=2, alias="hittingEnsemble")
    hitting_dt: float | None = Field(1e-3, gt=0, alias="hittingDt")
    small_site_energies: Energies = Field(default_factory=lambda: [1e-3, 1.0], alias="smallSiteEnergies")
    small_site_ensemble: int = Field(2000, ge=2, alias="smallSiteEnsemble")
    small_site_dt: float = Field(1e-5, gt=0, alias="smallSiteDt")
    small_site_steps: int = Field(10, ge=2, alias="smallSiteSteps")
    slow: bool = False
    checks: list[str] | None = None

    @field_validator("hitting_deltas")
    @classmethod
    def _check_deltas(cls, values: list[float]) -> list[float]:
        if any(not v > 0 for v in values):
            raise ValueError("hittingDeltas entries must be positive")
        return sorted(values, reverse=True)


class LabConfig(_Section):
    seed: int = Field(20240601, ge=0, le=SEED_MAX)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    coefficients: CoefficientConfig = Field(default_factory=CoefficientConfig)
    sde: SdeConfig = Field(default_factory=SdeConfig)
    micro: MicroSection = Field(default_factory=MicroSection)
    greenkubo: GreenKuboConfig = Field(default_factory=GreenKuboConfig)
    verify: VerifyConfig = Field(default_factory=VerifyConfig)

    def with_seed(self, seed: int | None) -> "LabConfig":
        if seed is None:
            return self
        if not 0 <= seed <= SEED_MAX:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
        return self.model_copy(update={"seed": seed})


def _describe(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        location = ".".join(str(item) for item in error.get("loc", ()))
        parts.append(f"{location}: {error.get('msg')}")
    return "; ".join(parts)


def parse_config(document: dict[str, Any]) -> LabConfig:
    try:
        return LabConfig.model_validate(document)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {_describe(exc)}") from exc


def load_config(path: Path | str | None) -> LabConfig:
    """Read and validate a JSON configuration; ``None`` gives all defaults."""
    if path is None:
        return LabConfig()
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
    if not isinstance(document, dict):
        raise ConfigError(f"configuration {path} must contain a JSON object")
    return parse_config(document)


def config_digest(config: LabConfig) -> str:
    return digest_of(config.model_dump(mode="json", by_alias=True))


def config_schema() -> dict[str, Any]:
    return LabConfig.model_json_schema(by_alias=True)


def default_output_dir() -> Path:
    return Path(os.getenv("ENERGY_LAB_OUTPUT_DIR", DEFAULT_OUTPUT_DIR))


def default_workers() -> int:
    try:
        return max(1, int(os.getenv("ENERGY_LAB_WORKERS", "1")))
    except ValueError:
        return 1
