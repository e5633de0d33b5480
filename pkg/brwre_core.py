#!/usr/bin/env python3
"""
╔═══════════════════════════════════════════════════════════════════════════════╗
║                        BRWRE Workbench Core Architecture                       ║
║                 Branching Random Walks in Random Environment                   ║
╚═══════════════════════════════════════════════════════════════════════════════╝

Core building blocks shared by every workbench module:
- Error hierarchy: one root error, config/domain/cap/numeric/output branches
- Logging setup: single entry point used by the command line
- StatPriority: execution order of statistic plugins
- StatPlugin: abstract base class for per-time statistics
- StatPipeline: plugin lifecycle and failure-isolated execution
- RunConfig: validated run configuration with layered loading

License: MIT
"""

import json
import logging
import os
import sys
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, asdict
from enum import IntEnum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / 'config'
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


# ═══════════════════════════════════════════════════════════════════════════════
# ERRORS
# ═══════════════════════════════════════════════════════════════════════════════

class BrwreError(Exception):
    """Root of every error raised by the workbench."""


class ConfigError(BrwreError, ValueError):
    """Invalid configuration or malformed input."""


class WeightSumError(ConfigError):
    """Environment mixture weights do not form a probability vector."""


class PmfError(ConfigError):
    """An offspring law violates the probability mass function invariants."""


class BudgetError(ConfigError):
    """A truncation budget is too small to be meaningful."""


class DomainError(BrwreError, ValueError):
    """An argument lies outside the domain of an operation."""


class CapError(BrwreError):
    """An enumeration or population exceeded its configured cap."""


class NumericAbortError(BrwreError):
    """A computation was aborted to avoid silently wrong numbers."""


class PopulationOverflowError(NumericAbortError, OverflowError):
    """A particle count left the unsigned 64-bit range."""

    def __init__(self, message: str, t: Optional[int] = None):
        super().__init__(message)
        self.t = t
        self.records: List[Any] = []


class OutputError(BrwreError, OSError):
    """Writing an artifact failed."""

    def __init__(self, path: Path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)


# ═══════════════════════════════════════════════════════════════════════════════
# LOGGING
# ═══════════════════════════════════════════════════════════════════════════════

def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    Configure root logging for a command-line invocation.

    Args:
        level: Level name; falls back to BRWRE_LOG_LEVEL, then WARNING
        log_file: Optional path of an additional log file
    """
    level_name = (level or os.environ.get('BRWRE_LOG_LEVEL') or 'WARNING').upper()
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level_name, logging.WARNING),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True
    )


# ═══════════════════════════════════════════════════════════════════════════════
# STATISTIC PLUGINS
# ═══════════════════════════════════════════════════════════════════════════════

class StatPriority(IntEnum):
    """Plugin execution priority levels; also fixes CSV column order."""
    CRITICAL = 1  # Population counts
    HIGH = 2      # Densities
    MEDIUM = 3    # Moment functionals, Y statistics
    LOW = 4       # Spot checks


@dataclass(frozen=True)
class StatContext:
    """Per-run constants handed to every plugin."""
    d: int
    m: float


class StatPlugin(ABC):
    """
    Abstract base class for statistic plugins.
    A plugin owns a fixed list of columns and fills them on each record.
    """

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        """
        Initialize plugin with optional configuration.

        Args:
            config: Plugin-specific configuration dictionary
        """
        self.config = config or {}
        self._name: Optional[str] = None
        self._version: str = "1.0.0"
        self._priority: StatPriority = StatPriority.MEDIUM
        self._enabled: bool = True
        self._initialized: bool = False

    @property
    def name(self) -> str:
        """Plugin name."""
        if self._name is None:
            return self.__class__.__name__
        return self._name

    @property
    def version(self) -> str:
        """Plugin version."""
        return self._version

    @property
    def priority(self) -> StatPriority:
        """Plugin priority level."""
        return self._priority

    @property
    def enabled(self) -> bool:
        """Whether plugin is enabled."""
        return self._enabled

    def enable(self):
        """Enable the plugin."""
        self._enabled = True

    def disable(self):
        """Disable the plugin."""
        self._enabled = False

    @abstractmethod
    def initialize(self, context: StatContext) -> bool:
        """
        Prepare the plugin for a run in the given context.

        Returns:
            True if initialization successful, False otherwise
        """

    @abstractmethod
    def columns(self) -> List[str]:
        """Column names this plugin fills, in output order."""

    @abstractmethod
    def process(self, record: Any, state: Any, context: StatContext) -> Any:
        """
        Fill this plugin's columns on a record.

        Args:
            record: StatRecord being built for the current time
            state: Occupancy state at that time
            context: Run constants

        Returns:
            The record (may be modified in place)
        """

    def shutdown(self):
        """Release anything held for the run."""


class StatPipeline:
    """
    Manages statistic plugins and runs them over states.
    A failing plugin leaves NaN in its own columns; the rest still run.
    """

    def __init__(self, context: StatContext):
        self.context = context
        self.plugins: List[StatPlugin] = []
        logger.debug("StatPipeline initialized")

    def load_plugin(self, plugin: StatPlugin) -> bool:
        """
        Load and initialize a plugin.

        Returns:
            True if loaded successfully
        """
        try:
            if plugin.initialize(self.context):
                plugin._initialized = True
                self.plugins.append(plugin)
                self._sort_plugins()
                logger.info(f"Plugin loaded: {plugin.name} v{plugin.version}")
                return True
            logger.error(f"Plugin initialization failed: {plugin.name}")
            return False
        except Exception as e:
            logger.error(f"Error loading plugin {plugin.name}: {e}")
            return False

    def unload_plugin(self, plugin_name: str) -> bool:
        """Unload a plugin by name."""
        plugin = self.get_plugin(plugin_name)
        if plugin is None:
            logger.warning(f"Plugin not found: {plugin_name}")
            return False
        try:
            plugin.shutdown()
        except Exception as e:
            logger.error(f"Error shutting down plugin {plugin_name}: {e}")
        self.plugins.remove(plugin)
        logger.info(f"Plugin unloaded: {plugin_name}")
        return True

    def _sort_plugins(self):
        """Sort plugins by priority; load order breaks ties."""
        self.plugins.sort(key=lambda p: p.priority)

    def _active(self) -> List[StatPlugin]:
        return [p for p in self.plugins if p.enabled and p._initialized]

    def columns(self) -> List[str]:
        """All statistic columns of enabled plugins in output order."""
        cols: List[str] = []
        for plugin in self._active():
            cols.extend(plugin.columns())
        return cols

    def process(self, record: Any, state: Any) -> Any:
        """
        Run every enabled plugin on one record.

        Returns:
            The filled record
        """
        for plugin in self._active():
            try:
                record = plugin.process(record, state, self.context)
            except Exception as e:
                logger.error(f"Error in plugin {plugin.name} at t={getattr(state, 't', '?')}: {e}")
                for col in plugin.columns():
                    record.set(col, float('nan'))
        return record

    def get_plugin(self, name: str) -> Optional[StatPlugin]:
        """Get plugin by name."""
        return next((p for p in self.plugins if p.name == name), None)

    def get_all_plugins(self) -> List[StatPlugin]:
        """Get all loaded plugins."""
        return self.plugins.copy()

    def shutdown_all(self):
        """Shutdown all plugins."""
        for plugin in self.plugins:
            try:
                plugin.shutdown()
            except Exception as e:
                logger.error(f"Error shutting down plugin {plugin.name}: {e}")
        self.plugins.clear()


# ═══════════════════════════════════════════════════════════════════════════════
# CONFIGURATION
# ═══════════════════════════════════════════════════════════════════════════════

MODES = ('aggregate', 'genealogy')


def index_label(n: Sequence[int]) -> str:
    """Column suffix for a multi-index: (2, 0, 0) -> '2_0_0'."""
    return "_".join(str(int(v)) for v in n)


def pad_index(n: Sequence[Any], d: int, fill: Any = 0) -> Tuple[Any, ...]:
    """Pad a short multi-index with zeros up to dimension d."""
    n = tuple(n)
    if len(n) > d:
        raise ConfigError(f"Multi-index {n} longer than dimension {d}")
    return n + (fill,) * (d - len(n))


def read_config_file(path: Path) -> Dict[str, Any]:
    """Read a JSON or TOML configuration file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix.lower() == '.toml':
            try:
                import tomllib
            except ImportError as e:
                raise ConfigError("TOML configs need Python 3.11+ (tomllib)") from e
            with open(path, 'rb') as f:
                return tomllib.load(f)
        with open(path, 'r') as f:
            return json.load(f)
    except ConfigError:
        raise
    except Exception as e:
        raise ConfigError(f"Could not parse {path}: {e}") from e


def load_bundled_config(name: str) -> Dict[str, Any]:
    """Load one of the JSON defaults shipped in config/."""
    path = CONFIG_DIR / name
    if not path.exists():
        logger.warning(f"Bundled config missing: {path}")
        return {}
    return read_config_file(path)


@dataclass
class RunConfig:
    """Everything needed to reproduce a run."""

    dimension: int = 3
    horizon: int = 10
    environment: Any = "env-b"
    env_seed: int = 0
    particle_seed: int = 0
    mode: str = "aggregate"
    replicas: int = 1
    moment_indices: List[List[int]] = field(default_factory=lambda: [[1], [2], [4]])
    y_indices: List[List[int]] = field(default_factory=lambda: [[2]])
    cosine_frequencies: List[List[float]] = field(default_factory=lambda: [[1.0]])
    exact_threshold: int = 1_000_000
    genealogy_cap: int = 100_000
    dp_radius: Optional[int] = None
    path_cap: int = 10_000_000
    wn_cap: int = 8
    workers: Optional[int] = None
    output_dir: str = "brwre_out"

    def validate(self) -> 'RunConfig':
        """Check invariants and normalize multi-indices; returns self."""
        if not isinstance(self.dimension, int) or self.dimension < 1:
            raise ConfigError(f"dimension must be an integer >= 1, got {self.dimension!r}")
        if not isinstance(self.horizon, int) or self.horizon < 0:
            raise ConfigError(f"horizon must be an integer >= 0, got {self.horizon!r}")
        if not isinstance(self.replicas, int) or self.replicas < 1:
            raise ConfigError(f"replicas must be an integer >= 1, got {self.replicas!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ('exact_threshold', 'genealogy_cap', 'path_cap', 'wn_cap'):
            if self._coerce_int(name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.dp_radius is not None and self._coerce_int('dp_radius') < 1:
            raise ConfigError("dp_radius must be positive")
        for name in ('env_seed', 'particle_seed'):
            if self._coerce_int(name) < 0:
                raise ConfigError(f"{name} must be non-negative")

        d = self.dimension
        try:
            self.moment_indices = [[int(v) for v in pad_index(n, d)] for n in self.moment_indices]
            self.y_indices = [[int(v) for v in pad_index(n, d)] for n in self.y_indices]
            self.cosine_frequencies = [[float(v) for v in pad_index(w, d, 0.0)] for w in self.cosine_frequencies]
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Malformed multi-index or frequency: {e}") from None
        for n in self.moment_indices + self.y_indices:
            if any(int(v) < 0 for v in n):
                raise ConfigError(f"Multi-index entries must be >= 0: {n}")
        for n in self.y_indices:
            if sum(n) > self.wn_cap:
                raise ConfigError(f"Y index {n} exceeds the W_n cap {self.wn_cap}")
        return self

    def _coerce_int(self, name: str) -> int:
        value = getattr(self, name)
        try:
            number = int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{name} must be an integer, got {value!r}") from None
        setattr(self, name, number)
        return number

    def to_dict(self) -> dict:
        """Convert to dictionary for serialization."""
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'RunConfig':
        """Create from dictionary; unknown keys are rejected."""
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        return cls(**data)


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Layer bundled defaults, an optional config file and explicit overrides.

    Args:
        path: Optional JSON/TOML config file
        overrides: Values that win over everything else (None entries ignored)

    Returns:
        Validated RunConfig
    """
    data = dict(load_bundled_config('run_defaults.json'))
    if path:
        data.update(read_config_file(Path(path)))
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data).validate()


__all__ = [
    '__version__',
    'BrwreError', 'ConfigError', 'WeightSumError', 'PmfError', 'BudgetError',
    'DomainError', 'CapError', 'NumericAbortError', 'PopulationOverflowError',
    'OutputError',
    'configure_logging',
    'StatPriority', 'StatContext', 'StatPlugin', 'StatPipeline',
    'MODES', 'index_label', 'pad_index', 'read_config_file', 'load_bundled_config',
    'RunConfig', 'load_run_config',
]
