"""Run configuration: one JSON file, overridable from the command line.

Precedence, highest first: command-line flag, configuration file,
environment (``GSA_OUT`` for the output directory only), built-in default.

Example::

    {
      "model": {"name": "synthetic", "params": {}},
      "seed": 1,
      "calibration": {"c": 0.1, "nu": 0.2, "alpha": 0.99},
      "sampler": {"n_chains": 5, "chain_length": 100000, "burn_in_fraction": 0.35},
      "h_max": 0.1,
      "psrf_threshold": 1.1
    }
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .calibrate import CalibrationConfig
from .errors import ConfigError
from .sampler import SamplerConfig

DEFAULT_OUT = "gsa_out"

_CALIBRATION_KEYS = {f.name for f in dataclasses.fields(CalibrationConfig)}
_SAMPLER_KEYS = {f.name for f in dataclasses.fields(SamplerConfig)}
_TOP_KEYS = {"model", "init", "seed", "calibration", "sampler", "output_dir", "h_max", "psrf_threshold",
             "n_grid", "probe", "plots", "threads"}


@dataclass
class RunConfig:
    model: dict
    calibration: dict
    sampler: dict = field(default_factory=dict)
    seed: int = 0
    init: Optional[list] = None
    output_dir: Optional[str] = None
    h_max: float = 0.1
    psrf_threshold: float = 1.1
    n_grid: int = 41
    probe: dict = field(default_factory=dict)
    plots: bool = True
    threads: Optional[int] = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        model = data.get("model")
        if isinstance(model, str):
            model = {"name": model}
        if not isinstance(model, dict) or "name" not in model:
            raise ConfigError("configuration needs a model spec: {\"model\": {\"name\": ..., \"params\": {...}}}")
        cal = dict(data.get("calibration") or {})
        smp = dict(data.get("sampler") or {})
        for name, section, keys in (("calibration", cal, _CALIBRATION_KEYS), ("sampler", smp, _SAMPLER_KEYS)):
            bad = set(section) - keys
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        return cls(
            model=model,
            calibration=cal,
            sampler=smp,
            seed=int(data.get("seed", 0)),
            init=data.get("init"),
            output_dir=data.get("output_dir"),
            h_max=float(data.get("h_max", 0.1)),
            psrf_threshold=float(data.get("psrf_threshold", 1.1)),
            n_grid=int(data.get("n_grid", 41)),
            probe=dict(data.get("probe") or {}),
            plots=bool(data.get("plots", True)),
            threads=data.get("threads"),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"configuration file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def apply_overrides(self, **flags: Any) -> "RunConfig":
        """Apply command-line values; ``None`` means "not given"."""
        mapping = {
            "c": ("calibration", "c"),
            "nu": ("calibration", "nu"),
            "alpha": ("calibration", "alpha"),
            "delta": ("calibration", "delta_override"),
            "chains": ("sampler", "n_chains"),
            "samples": ("sampler", "chain_length"),
        }
        for key, value in flags.items():
            if value is None:
                continue
            if key in mapping:
                section, name = mapping[key]
                getattr(self, section)[name] = value
            elif key == "out":
                self.output_dir = str(value)
            elif key == "seed":
                self.seed = int(value)
            elif key == "threads":
                self.threads = int(value)
            elif key == "psrf_threshold":
                self.psrf_threshold = float(value)
            elif key == "plots":
                self.plots = bool(value)
            else:
                raise ConfigError(f"unknown override {key!r}")
        return self

    def out_dir(self) -> Path:
        return Path(self.output_dir or os.environ.get("GSA_OUT") or DEFAULT_OUT)

    def worker_count(self) -> int:
        return int(self.threads) if self.threads else (os.cpu_count() or 1)

    def calibration_config(self) -> CalibrationConfig:
        if self.calibration.get("c") is None:
            raise ConfigError(
                "calibration.c is not set; run `lossgsa probe-c` to inspect candidate values "
                "and write the chosen c into the configuration"
            )
        kwargs = {"seed": self.seed, **self.calibration}
        try:
            return CalibrationConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"calibration: {exc}") from exc

    def sampler_config(self) -> SamplerConfig:
        kwargs = {"seed": self.seed, "threads": self.worker_count(), **self.sampler}
        try:
            return SamplerConfig(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sampler: {exc}") from exc
