"""Experiment configuration, validation and reproducibility manifests."""

from __future__ import annotations

import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError
from .integrators import TimeGrid
from .schedules import NoiseSchedule
from .stochastic import NoiseWindowPolicy
from .targets import GaussianMixtureTarget

EXPERIMENTS = (
    "sa-verify",
    "counterexample",
    "dg-sample",
    "sdg-sample",
    "quantile-est",
    "eqm-convergence",
    "sdg-eqm",
    "asymptotics",
    "selftest",
)
DETERMINISTIC = {"counterexample", "selftest"}


@dataclass
class ExperimentConfig:
    """Everything needed to rerun an experiment bit for bit.

    ``params`` holds experiment-specific settings (latent counts, sweeps,
    quantile levels and so on).
    """

    experiment: str
    seed: int | None = None
    target: dict | str = "appC3"
    schedule: dict = field(default_factory=lambda: {"kind": "vp"})
    grid: dict = field(default_factory=lambda: {"steps": 1024, "spacing": "log-snr", "t_end": None})
    guidance: dict | None = None
    noise: list | None = None
    params: dict = field(default_factory=dict)
    output_dir: str = "results"

    def validate(self) -> "ExperimentConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.experiment not in DETERMINISTIC:
            if self.seed is None:
                raise ConfigError(f"{self.experiment} requires an explicit integer seed")
            if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
                raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.build_schedule()
        self.build_target()
        steps = self.grid.get("steps")
        if not isinstance(steps, int) or steps < 0:
            raise ConfigError(f"grid.steps must be a non-negative integer, got {steps!r}")
        if self.grid.get("spacing", "log-snr") not in ("log-snr", "t"):
            raise ConfigError(f"grid.spacing must be 'log-snr' or 't', got {self.grid.get('spacing')!r}")
        if self.noise is not None:
            self.build_noise()
        if self.guidance is not None:
            q, c = self.guidance.get("q"), self.guidance.get("c")
            if q is None and c is None:
                raise ConfigError("guidance needs q or c")
            if q is not None and not 0 < q < 1:
                raise ConfigError(f"guidance.q must lie in (0, 1), got {q}")
        return self

    def build_schedule(self) -> NoiseSchedule:
        try:
            return NoiseSchedule.from_config(self.schedule)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid schedule: {exc}") from exc

    def build_target(self) -> GaussianMixtureTarget:
        try:
            return GaussianMixtureTarget.from_config(self.target)
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid target: {exc}") from exc

    def build_grid(self, schedule=None, steps=None) -> TimeGrid:
        schedule = schedule or self.build_schedule()
        steps = self.grid["steps"] if steps is None else steps
        return TimeGrid.build(schedule, steps, self.grid.get("t_end"), self.grid.get("spacing", "log-snr"))

    def build_noise(self) -> NoiseWindowPolicy:
        try:
            return NoiseWindowPolicy.from_config(self.noise or [])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid noise windows: {exc}") from exc

    def to_dict(self, include_output: bool = False) -> dict:
        """Serializable form; the output directory is left out so artifacts do not depend on it."""
        data = _canonical(asdict(self))
        if not include_output:
            data.pop("output_dir")
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        if "experiment" not in data:
            raise ConfigError("config is missing 'experiment'")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def digest(self) -> str:
        return config_hash(self.to_dict())


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def config_hash(cfg: dict) -> str:
    blob = json.dumps(_canonical(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
    }


class ArtifactWriter:
    """Writes CSV/JSON artifacts that embed the producing config, plus a manifest."""

    def __init__(self, config: ExperimentConfig, output_dir=None):
        self.config = config
        self.dir = Path(output_dir or config.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.paths: list[Path] = []
        self.started = time.perf_counter()

    def csv(self, name, header, rows):
        path = self.dir / name
        cfg = json.dumps(self.config.to_dict(), sort_keys=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# config: {cfg}\n")
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        self.paths.append(path)
        return path

    def json(self, name, payload):
        path = self.dir / name
        with open(path, "w") as fh:
            json.dump({"config": self.config.to_dict(), **_canonical(payload)}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.paths.append(path)
        return path

    def manifest(self, status: str, exit_code: int):
        payload = {
            "experiment": self.config.experiment,
            "config": self.config.to_dict(include_output=True),
            "config_hash": self.config.digest(),
            "versions": versions(),
            "wall_time_s": time.perf_counter() - self.started,
            "status": status,
            "exit_code": exit_code,
            "artifacts": {p.name: file_sha256(p) for p in self.paths},
        }
        path = self.dir / "manifest.json"
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)
