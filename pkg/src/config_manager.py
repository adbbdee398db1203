import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from models import ConfigError, TrainConfig
from transport import TransportMethod

EXAMPLES = ("1d", "2d")

# CLI / config spelling -> transport method name
METHOD_ALIASES = {
    "exact": "exact_lp",
    "minibatch": "minibatch_refine",
    "subsample": "subsample_avg",
}

TRAIN_KEYS = ("max_iters", "batch_size", "lr", "step_size", "gamma", "patience",
              "assignment_refresh_every", "global_assignment", "divergence_threshold")
TRANSPORT_KEYS = ("batch", "rounds", "k", "m", "max_exact")


@dataclass
class ExperimentConfig:
    example: str = "1d"
    n_min: int = 100
    n_max: int = 10_000
    n_count: int = 8
    n_list: Tuple[int, ...] = ()  # overrides n_min/n_max/n_count when set
    repeats: int = 5
    val_size: int = 100_000
    seed: int = 0
    out: str = "runs"
    workers: int = 1
    hidden: Tuple[int, ...] = (256, 256)
    train: TrainConfig = field(default_factory=TrainConfig)
    transport: TransportMethod = field(default_factory=TransportMethod)

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ConfigError(f"Unknown example '{self.example}', expected one of {EXAMPLES}")
        if not 1 <= self.n_min <= self.n_max or self.n_count < 1:
            raise ConfigError("Need 1 <= n_min <= n_max and n_count >= 1")
        if self.repeats < 1 or self.val_size < 1 or self.workers < 1:
            raise ConfigError("repeats, val_size and workers must be >= 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"Seed must be an unsigned 64-bit integer, got {self.seed}")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden must list at least one positive layer width")

    @property
    def method_alias(self) -> str:
        return {v: k for k, v in METHOD_ALIASES.items()}[self.transport.name]

    def sample_sizes(self) -> List[int]:
        """Explicit n_list, or n_count log-spaced sizes in [n_min, n_max]"""
        if self.n_list:
            return list(self.n_list)
        grid = np.logspace(np.log10(self.n_min), np.log10(self.n_max), self.n_count)
        return [int(v) for v in np.unique(np.round(grid).astype(int))]

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       workers: Optional[int] = None, method: Optional[str] = None) -> "ExperimentConfig":
        """Apply command-line flags on top of the file values"""
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if out is not None:
            changes["out"] = out
        if workers is not None:
            changes["workers"] = workers
        if method is not None:
            changes["transport"] = dataclasses.replace(self.transport, name=_method_name(method))
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Dict[str, str]]:
        experiment = {
            "example": self.example,
            "n_min": str(self.n_min),
            "n_max": str(self.n_max),
            "n_count": str(self.n_count),
            "n_list": ",".join(str(n) for n in self.n_list),
            "repeats": str(self.repeats),
            "val_size": str(self.val_size),
            "seed": str(self.seed),
            "out": self.out,
            "workers": str(self.workers),
            "hidden": ",".join(str(w) for w in self.hidden),
        }
        train = {key: _format(getattr(self.train, key)) for key in TRAIN_KEYS}
        transport = {"method": self.method_alias}
        transport.update({key: _format(getattr(self.transport, key)) for key in TRANSPORT_KEYS})
        return {"experiment": experiment, "train": train, "transport": transport}

    def to_cfg(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {value}" for key, value in values.items())
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _method_name(alias: str) -> str:
    if alias in METHOD_ALIASES:
        return METHOD_ALIASES[alias]
    if alias in METHOD_ALIASES.values():
        return alias
    raise ConfigError(f"Unknown transport method '{alias}', expected one of {sorted(METHOD_ALIASES)}")


def _convert(section: str, key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return lowered in ("true", "yes", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key} = '{raw}' is not a valid {type(default).__name__}") from None
    return raw


def _read_section(parser: configparser.ConfigParser, section: str, defaults: dict) -> dict:
    values = {}
    if not parser.has_section(section):
        return values
    for key, raw in parser.items(section, raw=True):
        if key not in defaults:
            raise ConfigError(f"Unknown key '{key}' in [{section}]")
        values[key] = _convert(section, key, raw, defaults[key])
    return values


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"Malformed config: {exc}") from exc

    unknown = set(parser.sections()) - {"experiment", "train", "transport"}
    if unknown:
        raise ConfigError(f"Unknown config section(s): {sorted(unknown)}")

    base = ExperimentConfig()
    exp_defaults = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)
                    if f.name not in ("train", "transport")}
    train_defaults = {key: getattr(base.train, key) for key in TRAIN_KEYS}
    transport_defaults = {key: getattr(base.transport, key) for key in TRANSPORT_KEYS}
    transport_defaults["method"] = base.method_alias

    experiment = _read_section(parser, "experiment", exp_defaults)
    train = _read_section(parser, "train", train_defaults)
    transport = _read_section(parser, "transport", transport_defaults)
    method = _method_name(transport.pop("method", base.method_alias))

    try:
        return ExperimentConfig(
            **experiment,
            train=TrainConfig(**train),
            transport=TransportMethod(name=method, **transport),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read a .cfg file; no path means all defaults"""
    if path is None:
        return ExperimentConfig()
    if not os.path.exists(path):
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r") as f:
        return parse_config(f.read())
