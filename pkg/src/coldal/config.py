"""Experiment settings and the flat JSON config format.

A config file holds a ``defaults`` block and a list of ``settings``, each of
which overrides any default key::

    {"version": 1,
     "defaults": {"k": 5, "j": 4, ...},
     "settings": [{"name": "Rand", "acquisition": "random"}, ...]}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path
from typing import List, Tuple

from .errors import ConfigError

ACQUISITIONS = ("random", "variance", "entropy", "proxy_static")
CONFIG_VERSION = 1


@dataclass(frozen=True)
class SettingConfig:
    name: str
    proxy_ranking: bool = False
    pretrained_weights: bool = False
    semi_supervised: bool = False
    acquisition: str = "random"
    k: int = 5
    j: int = 4
    full_steps: int = 2000
    desk_scale: float = 0.1
    semi_steps: int = 0  # 0: same as step_budget
    proxy_steps: int = 400
    proxy_val_every: int = 50
    m: int = 10
    dropout_rate: float = 0.2
    tau: float = 0.9
    alpha: float = 1.0
    beta: float = 0.001
    lr: float = 1e-4
    patch_size: int = 16
    batch_size: int = 2
    inference_patch: int = 32
    overlap: float = 0.25
    fg_bg_labeled: Tuple[float, float] = (1.0, 1.0)
    fg_bg_noisy: Tuple[float, float] = (9.0, 1.0)
    window: Tuple[float, float] = (125.0, 50.0)
    input_window: Tuple[float, float] = (40.0, 400.0)
    connectivity: int = 26
    keep_top: int = 1
    levels: int = 2
    base_channels: int = 8
    residual_blocks: bool = True
    warm_start_from: str = "proxy"
    certainty_kind: str = "variance"
    proxy_kind: str = "variance"
    consistency_target: str = "hard"
    aug_shift: float = 0.1
    aug_scale: float = 0.1
    aug_noise: float = 0.05
    include_background_dice: bool = False
    seeds: Tuple[int, ...] = (0, 1, 2)

    @property
    def step_budget(self) -> int:
        return max(1, int(round(self.full_steps * self.desk_scale)))

    @property
    def semi_step_budget(self) -> int:
        return self.semi_steps or self.step_budget

    @property
    def score_kind(self) -> str:
        """Uncertainty kind ranking the pool for this setting."""
        return self.acquisition if self.acquisition in ("variance", "entropy") else self.certainty_kind

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(SettingConfig)}
_PAIRS = {"fg_bg_labeled", "fg_bg_noisy", "window", "input_window"}
_POSITIVE = {
    "k", "full_steps", "desk_scale", "proxy_steps", "proxy_val_every", "m", "tau", "lr",
    "patch_size", "batch_size", "inference_patch", "levels", "base_channels", "keep_top",
}
_NON_NEGATIVE = {"j", "semi_steps", "alpha", "beta", "dropout_rate", "overlap", "aug_shift", "aug_scale", "aug_noise"}
_CHOICES = {
    "acquisition": ACQUISITIONS,
    "warm_start_from": ("proxy", "previous"),
    "certainty_kind": ("variance", "entropy"),
    "proxy_kind": ("variance", "entropy"),
    "consistency_target": ("hard", "soft"),
    "connectivity": (6, 26),
}


def _coerce(loc: str, key: str, value):
    default = _FIELDS[key].default
    if key in _PAIRS:
        if not isinstance(value, (list, tuple)) or len(value) != 2 or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(loc, "expected a pair of numbers")
        return (float(value[0]), float(value[1]))
    if key == "seeds":
        if not isinstance(value, list) or not value or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(loc, "expected a non-empty list of integers")
        if len(set(value)) != len(value):
            raise ConfigError(loc, "seeds must be unique")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(loc, "expected true/false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(loc, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(loc, "expected a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(loc, "expected a string")
    return value


def _validate(loc: str, s: SettingConfig) -> None:
    for key in _POSITIVE:
        if getattr(s, key) <= 0:
            raise ConfigError(f"{loc}.{key}", "must be positive")
    for key in _NON_NEGATIVE:
        if getattr(s, key) < 0:
            raise ConfigError(f"{loc}.{key}", "must be non-negative")
    for key, options in _CHOICES.items():
        if getattr(s, key) not in options:
            raise ConfigError(f"{loc}.{key}", f"must be one of {list(options)}")
    if s.dropout_rate >= 1.0:
        raise ConfigError(f"{loc}.dropout_rate", "must be < 1")
    if s.tau > 1.0:
        raise ConfigError(f"{loc}.tau", "must lie in (0, 1]")
    if s.overlap >= 1.0:
        raise ConfigError(f"{loc}.overlap", "must be < 1")
    if s.acquisition == "proxy_static" and not s.proxy_ranking:
        raise ConfigError(f"{loc}.acquisition", "proxy_static acquisition requires proxy_ranking")
    div = 2 ** (s.levels - 1)
    for key in ("patch_size", "inference_patch"):
        if getattr(s, key) % div:
            raise ConfigError(f"{loc}.{key}", f"must be divisible by {div}")
    for key in ("fg_bg_labeled", "fg_bg_noisy"):
        a, b = getattr(s, key)
        if a < 0 or b < 0 or a + b <= 0:
            raise ConfigError(f"{loc}.{key}", "ratio parts must be >= 0 and not both zero")
    if s.window[1] <= 0 or s.input_window[1] <= 0:
        raise ConfigError(f"{loc}.window", "window width must be positive")
    if not s.name:
        raise ConfigError(f"{loc}.name", "must be non-empty")


def _read_block(loc: str, block) -> dict:
    if not isinstance(block, dict):
        raise ConfigError(loc, "expected an object")
    out = {}
    for key, value in block.items():
        if key not in _FIELDS:
            raise ConfigError(f"{loc}.{key}", "unknown key")
        out[key] = _coerce(f"{loc}.{key}", key, value)
    return out


def parse_config_dict(doc) -> List[SettingConfig]:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected an object")
    unknown = set(doc) - {"version", "defaults", "settings", "description"}
    if unknown:
        raise ConfigError(f"<root>.{sorted(unknown)[0]}", "unknown key")
    if doc.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError("<root>.version", f"unsupported version {doc.get('version')!r}")
    defaults = _read_block("defaults", doc.get("defaults", {}))
    if "name" in defaults:
        raise ConfigError("defaults.name", "name must be set per setting")
    settings = doc.get("settings")
    if not isinstance(settings, list) or not settings:
        raise ConfigError("settings", "expected a non-empty list")
    out, names = [], set()
    for i, block in enumerate(settings):
        loc = f"settings[{i}]"
        values = {**defaults, **_read_block(loc, block)}
        if "name" not in values:
            raise ConfigError(f"{loc}.name", "missing")
        if values["name"] in names:
            raise ConfigError(f"{loc}.name", f"duplicate setting name {values['name']!r}")
        names.add(values["name"])
        setting = SettingConfig(**values)
        _validate(loc, setting)
        out.append(setting)
    return out


def parse_config(path) -> List[SettingConfig]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}", exc.msg) from exc
    return parse_config_dict(doc)


def default_config_path() -> Path:
    return Path(str(resources.files("coldal") / "configs" / "ablation_matrix.json"))


def load_default_config() -> List[SettingConfig]:
    return parse_config(default_config_path())


def with_overrides(settings: List[SettingConfig], **overrides) -> List[SettingConfig]:
    return [replace(s, **overrides) for s in settings]
