"""Experiment configuration: JSON documents validated by pydantic before any compute starts."""

import copy
import hashlib
import json
import os
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.brw.analysis import TailKind
from app.brw.errors import CalibrationError, ConfigError
from app.brw.model import Family, ModelSpec, Regime, calibrate
from app.brw.perpetuity import PerpetuityConfig, QKind

load_dotenv()

OUTPUT_ROOT_ENV = "BRW_OUTPUT_ROOT"
WORKERS_ENV = "BRW_WORKERS"
DEFAULT_OUTPUT_DIR = "outputs"


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelBlock(_Block):
    family: Family = Family.LATTICE_BINARY
    regime: Regime = Regime.BOUNDARY
    sigma2: Optional[float] = Field(default=None, gt=0.0)
    a: Optional[float] = Field(default=None, gt=0.0)
    gamma: Optional[float] = None
    rho: Optional[float] = None

    def build(self) -> ModelSpec:
        """Calibrate the block into a ModelSpec.

        Raises:
            CalibrationError: If the constraints are infeasible.
        """
        free = {}
        if self.sigma2 is not None:
            free["sigma2"] = self.sigma2
        if self.a is not None:
            free["a"] = self.a
        return calibrate(self.family, free, self.regime, gamma=self.gamma, rho=self.rho)

    @model_validator(mode="after")
    def _calibrates(self) -> "ModelBlock":
        try:
            self.build()
        except CalibrationError as e:
            raise ValueError(f"model block does not calibrate: {e}") from e
        return self


class WalkBlock(_Block):
    u_max: float = Field(default=15.0, gt=0.0)
    spacing: float = Field(default=0.05, gt=0.0)
    replicas: int = Field(default=100_000, ge=100)
    step_cap: int = Field(default=10**7, gt=0)
    method: str = "auto"
    harmonicity_samples: int = Field(default=100_000, ge=2)

    @field_validator("method")
    @classmethod
    def _known_method(cls, value: str) -> str:
        if value not in ("auto", "exact", "monte_carlo"):
            raise ValueError(f"Unknown renewal method: {value}")
        return value


class EngineBlock(_Block):
    n: int = Field(default=10, ge=0)
    xs: List[float] = Field(default_factory=lambda: [1.0])
    killing: bool = True
    v_offset: float = Field(default=8.0, gt=0.0)
    replicas: int = Field(default=1000, ge=1)
    node_budget: int = Field(default=10**8, gt=0)

    @field_validator("xs")
    @classmethod
    def _nonnegative(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("xs must list at least one barrier offset")
        if any(x < 0 for x in value):
            raise ValueError("Barrier offsets must be nonnegative")
        return value


class SpineBlock(_Block):
    replicas: int = Field(default=10_000, ge=2)
    y_points: int = Field(default=12, ge=1)
    y_grid: Optional[List[float]] = None

    @field_validator("y_grid")
    @classmethod
    def _increasing(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and (
            not value or any(y <= 0 for y in value) or any(b <= a for a, b in zip(value, value[1:]))
        ):
            raise ValueError("y_grid must be positive and increasing")
        return value


class PerpetuityBlock(_Block):
    q_kind: QKind = QKind.CONSTANT
    start_x: float = Field(default=0.0, ge=0.0)
    horizon: int = Field(default=10_000, ge=0)
    epsilon: float = Field(default=0.05, gt=0.0)
    c_R: float = Field(default=2.0, gt=0.0)
    replicas: int = Field(default=10_000, ge=2)
    starts: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 5.0, 10.0])
    j_max: int = Field(default=5, ge=0)
    excursion_replicas: int = Field(default=2000, ge=1)

    def perpetuity_config(self) -> PerpetuityConfig:
        return PerpetuityConfig(
            q_kind=self.q_kind, start_x=self.start_x, horizon=self.horizon,
            epsilon=self.epsilon, c_R=self.c_R,
        )


class AnalysisBlock(_Block):
    kind: TailKind = TailKind.EXPONENTIAL
    column: str = "D_trunc"
    quantile_range: Tuple[float, float] = (0.99, 0.9999)
    bootstrap: int = Field(default=200, ge=0)
    min_samples: int = Field(default=10_000, ge=10)

    @field_validator("quantile_range")
    @classmethod
    def _ordered(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = value
        if not 0.5 < lo < hi < 1.0:
            raise ValueError("quantile_range must satisfy 0.5 < lo < hi < 1")
        return value


class ExperimentConfig(_Block):
    model: ModelBlock = Field(default_factory=ModelBlock)
    walk: WalkBlock = Field(default_factory=WalkBlock)
    engine: EngineBlock = Field(default_factory=EngineBlock)
    spine: SpineBlock = Field(default_factory=SpineBlock)
    perpetuity: PerpetuityBlock = Field(default_factory=PerpetuityBlock)
    analysis: AnalysisBlock = Field(default_factory=AnalysisBlock)
    seed: int = Field(default=0, ge=0, lt=2**64)
    output_dir: str = DEFAULT_OUTPUT_DIR
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _cross_block(self) -> "ExperimentConfig":
        if self.analysis.column == "D" and self.model.regime is Regime.SUBCRITICAL:
            raise ValueError("The untruncated derivative martingale is only fitted for boundary models")
        return self


def _apply_env(data: dict) -> dict:
    root = os.getenv(OUTPUT_ROOT_ENV)
    if root:
        data["output_dir"] = os.path.join(root, data.get("output_dir", DEFAULT_OUTPUT_DIR))
    workers = os.getenv(WORKERS_ENV)
    if workers:
        try:
            data["workers"] = int(workers)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV} must be an integer, got {workers!r}")
    return data


def _merge(data: dict, overrides: Dict[str, Any]) -> dict:
    """Apply dotted-key overrides such as ``{"engine.replicas": 100}``."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        *blocks, leaf = dotted.split(".")
        target = data
        for block in blocks:
            target = target.setdefault(block, {})
            if not isinstance(target, dict):
                raise ConfigError(f"Cannot override {dotted}: {block} is not a block")
        target[leaf] = value
    return data


def parse_config(data: dict, overrides: Dict[str, Any] | None = None) -> ExperimentConfig:
    """Validate a config document.

    The BRW_* environment overrides apply first, then ``overrides`` (the
    command-line flags); ``None`` values are skipped.

    Raises:
        ConfigError: On unknown keys or failed preconditions.
    """
    try:
        return ExperimentConfig.model_validate(_merge(_apply_env(copy.deepcopy(data)), overrides or {}))
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}") from e


def load_config(path: str | None, overrides: Dict[str, Any] | None = None) -> ExperimentConfig:
    """Read and validate a JSON config file; ``None`` gives the defaults.

    Raises:
        ConfigError: If the file is missing, is not JSON or fails validation.
    """
    if path is None:
        return parse_config({}, overrides)
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (json.JSONDecodeError, IOError) as e:
        raise ConfigError(f"Failed to read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigError("Config must be a JSON object")
    return parse_config(data, overrides)


def config_hash(config: ExperimentConfig) -> str:
    """Hash of everything that determines outputs (output location and workers excluded)."""
    payload = config.model_dump(mode="json", exclude={"output_dir", "workers"})
    text = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
