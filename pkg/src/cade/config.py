"""Run configuration: nested dataclasses, JSON files, strict key checking.

A config is built from defaults, optionally overlaid with a JSON file, then
with CLI flags.  Unknown keys are rejected by name at every nesting level so
a typo never silently trains with a default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

__all__ = [
    "ConfigError",
    "ADV_CHOICES",
    "SAFETY_MODES",
    "LagrangeSection",
    "TrustSection",
    "CostAdvSection",
    "SafetySection",
    "RunConfig",
    "load_config_file",
]

ADV_CHOICES = ("mgae", "td", "gae", "gae-rtg", "reinforce", "vtrace")
SAFETY_MODES = ("off", "train", "infer", "both")
ENV_CHOICES = ("cliff-circular", "planar-river")
LEVEL_CHOICES = ("easy", "medium", "hard")


class ConfigError(ValueError):
    """Bad key, bad value, or unreadable config file."""


@dataclass
class LagrangeSection:
    enabled: bool = False
    lr: float = 0.01
    budget: float = 1.0
    beta_max: float = 2.0


@dataclass
class TrustSection:
    kl_mask: float = 0.02
    kl_stop: float = 0.02
    surrogate_coef: float = 0.015


@dataclass
class CostAdvSection:
    horizon: int = 1
    k: float = 8.0
    c_b: float = 0.5


@dataclass
class SafetySection:
    mode: str = "off"
    samples: int = 10
    horizon: int = 1
    threshold: float = 1.0
    activation_fraction: float = 1.0 / 3.0


@dataclass
class RunConfig:
    """Everything a training or evaluation run needs, flat where possible."""

    env: str = "cliff-circular"
    level: str = "medium"
    adv: str = "mgae"
    mgae_mode: str = "inclusive"
    seed: int = 0
    step_budget: int = 150_000
    episodes_per_iter: int = 1
    timeout: int = 500
    gamma: float = 0.99
    lam: float = 0.95
    vtrace_clip: float = 1.0
    window: int = 10
    normalize_adv: bool = True
    actor_epochs: int = 1
    lr: float = 0.001
    hidden_dim: int = 128
    head_width: int = 64
    checkpoint_every: int = 500
    out_dir: str = "runs"
    lagrange: LagrangeSection = field(default_factory=LagrangeSection)
    trust: TrustSection = field(default_factory=TrustSection)
    cost_adv: CostAdvSection = field(default_factory=CostAdvSection)
    safety: SafetySection = field(default_factory=SafetySection)

    def validate(self) -> "RunConfig":
        def expect(ok: bool, msg: str):
            if not ok:
                raise ConfigError(msg)

        expect(self.env in ENV_CHOICES, f"env must be one of {ENV_CHOICES}, got {self.env!r}")
        expect(self.level in LEVEL_CHOICES, f"level must be one of {LEVEL_CHOICES}, got {self.level!r}")
        expect(self.adv in ADV_CHOICES, f"adv must be one of {ADV_CHOICES}, got {self.adv!r}")
        expect(self.mgae_mode in ("inclusive", "exclusive"),
               f"mgae_mode must be inclusive or exclusive, got {self.mgae_mode!r}")
        expect(self.safety.mode in SAFETY_MODES,
               f"safety.mode must be one of {SAFETY_MODES}, got {self.safety.mode!r}")
        expect(self.step_budget >= 0, "step_budget must be >= 0")
        expect(self.episodes_per_iter >= 1, "episodes_per_iter must be >= 1")
        expect(self.timeout >= 1, "timeout must be >= 1")
        expect(0.0 < self.gamma <= 1.0, "gamma must be in (0, 1]")
        expect(0.0 <= self.lam <= 1.0, "lam must be in [0, 1]")
        expect(self.window >= 1, "window must be >= 1")
        expect(self.actor_epochs >= 1, "actor_epochs must be >= 1")
        expect(self.lr > 0.0, "lr must be positive")
        expect(self.hidden_dim >= 1 and self.head_width >= 1,
               "hidden_dim and head_width must be >= 1")
        expect(self.checkpoint_every >= 1, "checkpoint_every must be >= 1")
        expect(self.cost_adv.horizon >= 1, "cost_adv.horizon must be >= 1")
        expect(self.safety.samples >= 1, "safety.samples must be >= 1")
        expect(self.safety.horizon >= 1, "safety.horizon must be >= 1")
        expect(self.safety.threshold > 0.0, "safety.threshold must be positive")
        expect(0.0 <= self.safety.activation_fraction <= 1.0,
               "safety.activation_fraction must be in [0, 1]")
        expect(self.lagrange.lr >= 0.0 and self.lagrange.budget >= 0.0,
               "lagrange.lr and lagrange.budget must be non-negative")
        expect(0.0 <= self.lagrange.beta_max, "lagrange.beta_max must be non-negative")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, path="")


def _build(dc_type, data: dict, path: str):
    """Recursive dataclass construction that names any unknown key."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or 'top level'}, got {type(data).__name__}")
    spec = {f.name: f for f in fields(dc_type)}
    unknown = sorted(set(data) - set(spec))
    if unknown:
        where = f" under {path!r}" if path else ""
        raise ConfigError(f"unknown config key{'s' if len(unknown) > 1 else ''}"
                          f"{where}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = spec[name]
        nested = _SECTION_TYPES.get(name)
        if nested is not None:
            kwargs[name] = _build(nested, value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = _coerce(name, value, f.default, path)
    return dc_type(**kwargs)


# `from __future__ import annotations` turns field types into strings, so the
# nested sections are resolved by field name instead.
_SECTION_TYPES = {
    "lagrange": LagrangeSection,
    "trust": TrustSection,
    "cost_adv": CostAdvSection,
    "safety": SafetySection,
}


def _coerce(name: str, value, default, path: str):
    """Match the default's scalar type; bool is checked before int since bool <: int."""
    full = f"{path}.{name}" if path else name
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{full} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{full} must be an integer, got {value!r}")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{full} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{full} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{full} must be a string, got {value!r}")
        return value
    return value


def load_config_file(path: str) -> dict:
    """Read a JSON config file; parse errors surface as ConfigError."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data
