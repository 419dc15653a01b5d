import json
import logging
import os
import zlib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.fractal import LADDER_KINDS
from services.grid import GridSpec
from services.ingestion import DEFAULT_EXCLUDED_HOURS
from services.placement import AlgoParams, Algorithm
from services.synth import AttractorSpec, StreamSpec, TripLaw
from utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_GLOBAL_RATE = 0.5


class IngestSettings(BaseModel):
    """Snapshot bucketing parameters."""

    model_config = ConfigDict(extra="forbid")

    tau: float = Field(180.0, gt=0, description="snapshot length in seconds")
    excluded_hours: List[int] = Field(default_factory=lambda: sorted(DEFAULT_EXCLUDED_HOURS))
    start_time: Optional[int] = None
    end_time: Optional[int] = None

    @field_validator('excluded_hours')
    @classmethod
    def validate_hours(cls, v):
        bad = [h for h in v if not 0 <= h < 24]
        if bad:
            raise ValueError(f'excluded hours must lie in 0..23, got {bad}')
        return sorted(set(v))


class FractalSettings(BaseModel):
    """Correlation-curve ladder and range detection."""

    model_config = ConfigDict(extra="forbid")

    ladder_floor: float = Field(100.0, gt=0)
    ladder_ceiling: Optional[float] = Field(None, gt=0, description="defaults to the pickups' bounding size")
    ladder_kind: str = Field("dyadic", description="dyadic | geometric")
    n_scales: int = Field(12, ge=3)
    fit_range: Optional[Tuple[float, float]] = None
    min_r_squared: float = Field(0.98, gt=0, le=1)
    min_scales: int = Field(4, ge=3)

    @field_validator('fit_range')
    @classmethod
    def validate_fit_range(cls, v):
        if v is not None and not 0 < v[0] < v[1]:
            raise ValueError('fit_range must be (lo, hi) with 0 < lo < hi')
        return v

    @field_validator('ladder_kind')
    @classmethod
    def validate_ladder_kind(cls, v):
        if v not in LADDER_KINDS:
            raise ValueError(f'ladder_kind must be one of {LADDER_KINDS}')
        return v


class StreamSettings(BaseModel):
    """Synthetic stream parameters; the grid and seed come from the run config."""

    model_config = ConfigDict(extra="forbid")

    attractor: AttractorSpec = Field(default_factory=lambda: AttractorSpec(scale=6400.0))
    rate_map: Optional[List[List[float]]] = None
    global_rate: Optional[float] = Field(None, ge=0)
    n_requests: Optional[int] = Field(None, ge=0)
    duration: float = Field(7 * 86_400.0, gt=0)
    start_time: int = 0
    trip_law: TripLaw = Field(default_factory=TripLaw)

    def to_spec(self, grid: GridSpec, seed: int) -> StreamSpec:
        """StreamSpec on ``grid``; a global rate is used when no driver is set."""
        data = self.model_dump(exclude_none=True)
        if not any(k in data for k in ('rate_map', 'global_rate', 'n_requests')):
            data['global_rate'] = DEFAULT_GLOBAL_RATE
        try:
            return StreamSpec(grid=grid, seed=seed, **data)
        except ValidationError as e:
            raise ConfigError(f"invalid stream settings: {_first_error(e)}")


class LoggingSettings(BaseModel):
    """Logging configuration."""

    model_config = ConfigDict(extra="forbid")

    log_level: str = "INFO"
    log_dir: Optional[str] = None
    enable_file_logging: bool = True
    enable_json_logging: bool = True
    max_log_file_size_mb: int = Field(50, ge=1)
    log_backup_count: int = Field(5, ge=0)

    @field_validator('log_level')
    @classmethod
    def validate_log_level(cls, v):
        valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
        if v.upper() not in valid_levels:
            raise ValueError(f'Log level must be one of: {valid_levels}')
        return v.upper()


def _default_algorithms() -> List[AlgoParams]:
    return [AlgoParams(algorithm=a) for a in Algorithm]


class RunConfig(BaseModel):
    """Resolved configuration of one command invocation."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    grid: GridSpec = Field(default_factory=GridSpec)
    ingest: IngestSettings = Field(default_factory=IngestSettings)
    fractal: FractalSettings = Field(default_factory=FractalSettings)
    stream: StreamSettings = Field(default_factory=StreamSettings)
    algorithms: List[AlgoParams] = Field(default_factory=_default_algorithms)
    input: Optional[str] = None
    out_dir: str = "out"
    max_workers: int = Field(4, ge=1)
    logging: LoggingSettings = Field(default_factory=LoggingSettings)

    @model_validator(mode="after")
    def validate_algorithms(self):
        labels = [a.label for a in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ValueError(f'algorithms must be distinct, got {labels}')
        for params in self.algorithms:
            if params.epsilon_prime < self.grid.epsilon:
                raise ValueError(f'{params.label}: epsilon_prime {params.epsilon_prime} is smaller '
                                 f'than the cell side {self.grid.epsilon}')
        return self

    def derive_seed(self, component: str) -> int:
        """Stable per-component seed from the global seed and a component label."""
        entropy = [self.seed, zlib.crc32(component.encode('utf-8'))]
        return int(np.random.SeedSequence(entropy).generate_state(1)[0])

    def resolved_algorithms(self) -> List[AlgoParams]:
        """Algorithm parameters with derived seeds filled in."""
        return [p if p.seed is not None else p.model_copy(update={'seed': self.derive_seed(p.label)})
                for p in self.algorithms]

    def stream_spec(self) -> StreamSpec:
        return self.stream.to_spec(self.grid, self.derive_seed('synth'))


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = '.'.join(str(part) for part in first['loc'])
    return f"{location}: {first['msg']}" if location else first['msg']


def _set_dotted(data: Dict[str, Any], key: str, value: Any):
    keys = key.split('.')
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override {key}: {k} is not a section")
    node[keys[-1]] = value


def select_algorithms(data: Dict[str, Any], names: Sequence[str]) -> List[Dict[str, Any]]:
    """Algorithm entries for ``names``, reusing configured parameters when present."""
    configured = {}
    for entry in data.get('algorithms') or []:
        if isinstance(entry, dict) and 'algorithm' in entry:
            configured[entry['algorithm']] = entry
    selected = []
    for name in names:
        try:
            Algorithm(name)
        except ValueError:
            raise ConfigError(f"unknown algorithm {name!r}",
                              choices=[a.value for a in Algorithm])
        selected.append(configured.get(name, {'algorithm': name}))
    return selected


class ConfigManager:
    """Load a JSON config file and apply flag overrides (flags win)."""

    def __init__(self, config_file: Optional[str] = None,
                 overrides: Optional[Dict[str, Any]] = None,
                 algorithms: Optional[Sequence[str]] = None):
        self.config_file = config_file
        self.overrides = dict(overrides or {})
        self.algorithms = list(algorithms or [])
        self._settings: Optional[RunConfig] = None
        self._load_settings()

    def _read_file(self) -> Dict[str, Any]:
        if not self.config_file:
            return {}
        if not os.path.exists(self.config_file):
            raise ConfigError(f"config file not found: {self.config_file}", path=self.config_file)
        try:
            with open(self.config_file, 'r', encoding='utf-8') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e.msg} (line {e.lineno})",
                              path=self.config_file)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object", path=self.config_file)
        return data

    def _load_settings(self):
        data = self._read_file()
        for key, value in self.overrides.items():
            if value is not None:
                _set_dotted(data, key, value)
        if self.algorithms:
            data['algorithms'] = select_algorithms(data, self.algorithms)
        try:
            self._settings = RunConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {_first_error(e)}")
        logger.debug(f"Loaded configuration (seed {self._settings.seed})")

    @property
    def settings(self) -> RunConfig:
        """Get current settings."""
        return self._settings

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by dotted key."""
        value = self._settings
        try:
            for k in key.split('.'):
                value = getattr(value, k)
            return value
        except AttributeError:
            return default

    def save_config(self, file_path: str):
        """Save current configuration to file."""
        config_dict = self._settings.model_dump(mode='json')
        Path(file_path).parent.mkdir(parents=True, exist_ok=True)
        with open(file_path, 'w', encoding='utf-8') as f:
            json.dump(config_dict, f, indent=2, sort_keys=True)
            f.write('\n')

    def validate_config(self) -> List[str]:
        """Soft issues that do not block a run."""
        issues = []
        settings = self._settings

        out_dir = Path(settings.out_dir)
        if out_dir.exists() and not out_dir.is_dir():
            issues.append(f"Output path {out_dir} exists and is not a directory")

        if settings.input and not os.path.exists(settings.input):
            issues.append(f"Input file {settings.input} does not exist")

        if len(settings.ingest.excluded_hours) == 24:
            issues.append("Every hour is excluded; no snapshot will be retained")

        fit_range = settings.fractal.fit_range
        if fit_range is not None and fit_range[0] < settings.fractal.ladder_floor:
            issues.append(f"Fit range starts below the ladder floor {settings.fractal.ladder_floor}")

        return issues

    def get_logging_config(self) -> Dict[str, Any]:
        """Get logging configuration."""
        log = self._settings.logging
        return {
            "log_level": log.log_level,
            "enable_file": log.enable_file_logging,
            "enable_json": log.enable_json_logging,
            "max_file_size": log.max_log_file_size_mb * 1024 * 1024,
            "backup_count": log.log_backup_count,
        }


def get_settings(config_file: Optional[str] = None) -> RunConfig:
    """Settings from an optional config file."""
    return ConfigManager(config_file=config_file).settings


def load_config_from_file(file_path: str) -> ConfigManager:
    """Load configuration from JSON file."""
    return ConfigManager(config_file=file_path)


def create_default_config_file(file_path: str):
    """Create a default configuration file."""
    default_config = {
        "seed": 0,
        "grid": {"epsilon": 100.0, "rows": 64, "cols": 64,
                 "origin_lat": 0.0, "origin_lon": 0.0},
        "ingest": {"tau": 180.0, "excluded_hours": sorted(DEFAULT_EXCLUDED_HOURS)},
        "fractal": {"ladder_floor": 100.0, "n_scales": 12, "min_r_squared": 0.98},
        "stream": {
            "attractor": {"kind": "sierpinski_triangle", "scale": 6400.0},
            "global_rate": DEFAULT_GLOBAL_RATE,
            "duration": 7 * 86_400.0,
            "trip_law": {"kind": "attractor"},
        },
        "algorithms": [
            {"algorithm": "urand_nh", "epsilon_prime": 500.0},
            {"algorithm": "pp_lh", "epsilon_prime": 500.0, "history_m": 20, "min_samples_u": 3},
            {"algorithm": "ftl_ch", "epsilon_prime": 500.0, "history_m": 3, "tie_break": "random"},
            {"algorithm": "opt", "epsilon_prime": 500.0},
        ],
        "out_dir": "out",
        "logging": {"log_level": "INFO"},
    }

    Path(file_path).parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8') as f:
        json.dump(default_config, f, indent=2)
        f.write('\n')
