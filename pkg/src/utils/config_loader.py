import os
from dataclasses import dataclass, fields, replace
from typing import Optional

import yaml
from dotenv import load_dotenv
from loguru import logger

from src.core.errors import ConfigError

EMIT_MODES = ("loop", "tile", "tile-pseudo-python")
ORACLES = ("program", "dense")
DEFAULT_CONFIG_PATH = "config/config.yaml"

_ENV = {
    "seed": ("REDUXION_SEED", int),
    "trials": ("REDUXION_TRIALS", int),
    "tol_rel": ("REDUXION_TOL_REL", float),
    "tol_abs": ("REDUXION_TOL_ABS", float),
    "log_level": ("REDUXION_LOG_LEVEL", str),
}


def parse_shape(text):
    """Parse ``"2,4"`` or ``"1,2,16,16,8"`` into a tuple of ints."""
    if text is None or isinstance(text, tuple):
        return text
    if isinstance(text, list):
        return tuple(int(d) for d in text)
    try:
        return tuple(int(d) for d in str(text).split(",") if d.strip())
    except ValueError:
        raise ConfigError(f"shape {text!r} must be comma separated integers") from None


@dataclass(frozen=True)
class RunConfig:
    """Everything one CLI invocation needs."""

    benchmark: Optional[str] = "softmax_denom"
    ir_path: Optional[str] = None
    schedule_path: Optional[str] = None
    shape: Optional[tuple] = None
    seed: int = 0
    trials: int = 10
    tol_rel: float = 1e-10
    tol_abs: float = 1e-12
    f32_tol_rel: float = 1e-3
    f32_tol_abs: float = 1e-6
    dump_dir: str = "dumps"
    emit: str = "tile"
    f32: bool = False
    log_level: str = "WARNING"
    check_repair: bool = False
    oracle: str = "program"
    repair_samples: int = 1000
    reduce_domain: int = 8

    def validate(self):
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        for name in ("tol_rel", "tol_abs", "f32_tol_rel", "f32_tol_abs"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.shape is not None and len(self.shape) not in (2, 5):
            raise ConfigError(f"shape takes 2 (rows,cols) or 5 (B,N,Sq,Skv,H) values, got {len(self.shape)}")
        if self.emit not in EMIT_MODES:
            raise ConfigError(f"emit mode must be one of {', '.join(EMIT_MODES)}")
        if self.oracle not in ORACLES:
            raise ConfigError(f"oracle must be one of {', '.join(ORACLES)}")
        if self.oracle == "dense" and self.ir_path:
            raise ConfigError("the dense oracle needs a benchmark, not an IR file")
        return self

    @property
    def tolerances(self):
        """(relative, absolute) tolerance for the configured precision."""
        if self.f32:
            return max(self.tol_rel, self.f32_tol_rel), max(self.tol_abs, self.f32_tol_abs)
        return self.tol_rel, self.tol_abs


class ConfigLoader:
    def __init__(self, config_path=None):
        """
        Initialize ConfigLoader and load the YAML configuration.

        Args:
            config_path (str): Path to the YAML configuration file. Falls back to
                ``REDUXION_CONFIG`` and then ``config/config.yaml``.
        """
        load_dotenv()
        self.config_path = config_path or os.getenv("REDUXION_CONFIG", DEFAULT_CONFIG_PATH)
        self.config = self._load_yaml(self.config_path)

    def _load_yaml(self, path):
        """
        Load a YAML file safely.

        Returns:
            dict: Parsed YAML content, empty when the file is missing or malformed.
        """
        try:
            with open(path, "r") as f:
                content = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.warning("configuration file not found at {}; using defaults", path)
            return {}
        except yaml.YAMLError as e:
            logger.warning("failed to parse configuration file at {}: {}; using defaults", path, e)
            return {}
        if not isinstance(content, dict):
            logger.warning("configuration file at {} is not a mapping; using defaults", path)
            return {}
        return content

    def _from_yaml(self):
        run = self.config.get("run") or {}
        tolerance = self.config.get("tolerance") or {}
        repair = self.config.get("repair") or {}
        values = {
            "benchmark": run.get("benchmark"),
            "shape": run.get("shape"),
            "schedule_path": run.get("schedule"),
            "seed": run.get("seed"),
            "trials": run.get("trials"),
            "emit": run.get("emit"),
            "dump_dir": run.get("dump_dir"),
            "log_level": run.get("log_level"),
            "oracle": run.get("oracle"),
            "tol_rel": tolerance.get("rel"),
            "tol_abs": tolerance.get("abs"),
            "f32_tol_rel": tolerance.get("f32_rel"),
            "f32_tol_abs": tolerance.get("f32_abs"),
            "repair_samples": repair.get("samples"),
            "reduce_domain": repair.get("reduce_domain"),
        }
        return {k: v for k, v in values.items() if v is not None}

    def _from_env(self):
        values = {}
        for field_name, (var, kind) in _ENV.items():
            raw = os.getenv(var)
            if raw is None or raw == "":
                continue
            try:
                values[field_name] = kind(raw)
            except ValueError:
                raise ConfigError(f"{var}={raw!r} is not a valid {kind.__name__}") from None
        return values

    def run_config(self, overrides=None):
        """
        Layer defaults, the YAML file, environment variables and ``overrides``.

        Args:
            overrides (dict): CLI values; ``None`` entries are ignored.

        Returns:
            RunConfig: The validated configuration.
        """
        known = {f.name for f in fields(RunConfig)}
        values = {}
        for layer in (self._from_yaml(), self._from_env(), overrides or {}):
            unknown = set(layer) - known
            if unknown:
                raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
            values.update({k: v for k, v in layer.items() if v is not None})
        if "shape" in values:
            values["shape"] = parse_shape(values["shape"])
        if values.get("ir_path") and (overrides or {}).get("benchmark") is None:
            values["benchmark"] = None
        config = replace(RunConfig(), **values)
        logger.debug("run configuration: {}", config)
        return config.validate()
