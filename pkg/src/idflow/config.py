"""Run configuration: one JSON document with a section per component.

Example::

    {
      "seed": 0,
      "n_samples": 256,
      "task": {"kind": "mixture2d"},
      "net": {"hidden_dims": [64, 64]},
      "train": {"steps": 2000, "k_max": 2},
      "path": {"sigma": 0.5},
      "sample": {"steps": 20, "refinements": 1},
      "eval": {"ablation_nfe": 24}
    }

Missing keys take their defaults. ``net.head`` and ``net.dim`` follow the
task unless given explicitly. The run seed lives at the top level only.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .exceptions import InvalidArgumentError
from .flow import PathConfig, TrainConfig
from .nn import NetConfig
from .sampler import SampleConfig
from .tasks import TaskSpec


class ConfigError(InvalidArgumentError):
    """Invalid configuration; ``key`` is the dotted name of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class EvalConfig:
    n_reference: int = 2000
    idempotency_samples: int = 256
    ablation_nfe: int = 24
    ablation_ks: tuple = (0, 1, 2, 3)
    ca_tolerance: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "ablation_ks", tuple(int(k) for k in self.ablation_ks))
        if self.n_reference < 1 or self.idempotency_samples < 1:
            raise InvalidArgumentError("n_reference and idempotency_samples must be positive")
        if self.ablation_nfe < 1:
            raise InvalidArgumentError("ablation_nfe must be positive")
        if not self.ablation_ks or min(self.ablation_ks) < 0:
            raise InvalidArgumentError("ablation_ks must be non-negative refinement counts")
        if any(self.ablation_nfe < 1 + k for k in self.ablation_ks):
            raise InvalidArgumentError("ablation_nfe is too small for the largest k")
        if not self.ca_tolerance > 0:
            raise InvalidArgumentError("ca_tolerance must be positive")


SECTIONS = {
    "task": TaskSpec,
    "net": NetConfig,
    "train": TrainConfig,
    "path": PathConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
}
TOP_LEVEL = ("seed", "n_samples")


def _section_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    path: PathConfig = field(default_factory=PathConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    n_samples: int = 256

    def to_dict(self) -> dict:
        d = {name: _section_dict(getattr(self, name)) for name in SECTIONS}
        d["train"].pop("seed", None)
        d["seed"] = self.seed
        d["n_samples"] = self.n_samples
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def label(self) -> str:
        """``"baseline"`` for plain flow matching, ``"idflow"`` otherwise."""
        return "baseline" if self.train.refine_branch_prob == 0 else "idflow"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>", "configuration must be a JSON object")
        for key in d:
            if key not in SECTIONS and key not in TOP_LEVEL:
                raise ConfigError(key, "unknown configuration key")
        seed = _int_key(d, "seed", 0, minimum=0)
        n_samples = _int_key(d, "n_samples", 256, minimum=1)
        sections = {}
        for name, klass in SECTIONS.items():
            raw = d.get(name, {})
            if not isinstance(raw, dict):
                raise ConfigError(name, "section must be a JSON object")
            raw = dict(raw)
            if name == "train":
                if "seed" in raw:
                    raise ConfigError("train.seed", "set the run seed with the top-level 'seed' key")
                raw["seed"] = seed
            if name == "net":
                task = sections["task"]
                for key, value in (("head", task.head), ("dim", task.state_dim)):
                    if key in raw and raw[key] != value:
                        raise ConfigError(f"net.{key}", f"task {task.kind!r} needs {key}={value!r}, got {raw[key]!r}")
                    raw[key] = value
            sections[name] = _build_section(name, klass, raw)
        return cls(seed=seed, n_samples=n_samples, **sections)


def _int_key(d: dict, key: str, default: int, minimum: int) -> int:
    value = d.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(key, f"expected an integer >= {minimum}, got {value!r}")
    return value


def _build_section(name: str, klass, raw: dict):
    fields = {f.name for f in dataclasses.fields(klass)}
    for key in raw:
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
    builder = getattr(klass, "from_dict", None)
    make = (lambda kw: builder(kw)) if builder is not None else (lambda kw: klass(**kw))
    try:
        return make(raw)
    except (InvalidArgumentError, TypeError, ValueError) as exc:
        # find the entry that breaks the section on its own
        for key, value in raw.items():
            if name == "train" and key == "seed":
                continue
            try:
                make({key: value})
            except (InvalidArgumentError, TypeError, ValueError) as single:
                raise ConfigError(f"{name}.{key}", str(single)) from None
        raise ConfigError(name, str(exc)) from None


def parse_override(text: str):
    """``"train.k_max=2"`` -> ``(["train", "k_max"], 2)``; values are JSON or plain strings."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, value = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(key, "malformed dotted key")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return parts, parsed


def apply_overrides(d: dict, overrides) -> dict:
    out = json.loads(json.dumps(d))
    for text in overrides:
        parts, value = parse_override(text)
        if len(parts) > 2:
            raise ConfigError(".".join(parts), "keys nest at most one level (section.key)")
        if len(parts) == 2:
            section = out.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(parts[0], "section must be a JSON object")
            section[parts[1]] = value
        else:
            out[parts[0]] = value
    return out


def load_config_dict(path: os.PathLike) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"not valid JSON ({exc})") from None
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read config ({exc.strerror})") from None


def resolve(base: dict, overrides=(), seed=None) -> RunConfig:
    d = apply_overrides(base, overrides)
    if seed is not None:
        d["seed"] = seed
    return RunConfig.from_dict(d)
