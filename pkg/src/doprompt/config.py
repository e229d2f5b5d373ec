"""Run configuration: typed dataclasses plus the flat key=value file format."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .vit import ViTConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "RunConfig",
    "TrainConfig",
    "VARIANTS",
    "load_config",
    "parse_config_text",
    "save_config",
]

VARIANTS = ("doprompt", "erm", "no_adapter", "no_lw", "no_ladapt", "frozen_backbone")


class ConfigError(ValueError):
    """Bad config file, key, or value."""


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_per_domain: int = 16
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    dropout: float = 0.1
    lam: float = 1.0
    prompt_length: int = 4
    seed: int = 0
    eval_interval: int = 100
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError(f"steps must be > 0, got {self.steps}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class DataConfig:
    num_domains: int = 4
    per_domain_count: int = 500
    data_seed: int = 0


@dataclass
class RunConfig:
    """Everything one experiment needs; flattens to/from key=value text."""

    train: TrainConfig
    vit: ViTConfig
    data: DataConfig
    variant: str = "doprompt"
    target_domain: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")


# file key -> (section, attribute, type); "lambda" maps onto TrainConfig.lam
_KEYMAP = {}
for f in fields(TrainConfig):
    key = "lambda" if f.name == "lam" else f.name
    _KEYMAP[key] = ("train", f.name, f.type)
for f in fields(ViTConfig):
    if f.name == "dropout_rate":
        continue  # the training dropout key is applied to the ViT at build time
    _KEYMAP[f.name] = ("vit", f.name, f.type)
for f in fields(DataConfig):
    _KEYMAP[f.name] = ("data", f.name, f.type)
_KEYMAP["variant"] = ("run", "variant", "str")
_KEYMAP["target_domain"] = ("run", "target_domain", "int")

_TYPES = {"int": int, "float": float, "str": str, "bool": lambda s: s.lower() in ("1", "true", "yes")}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat key=value lines; '#' starts a comment; blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYMAP:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[key] = value
    return out


def build_run_config(kv: dict, overrides: dict | None = None) -> RunConfig:
    merged = dict(kv)
    for key, value in (overrides or {}).items():
        if key not in _KEYMAP:
            raise ConfigError(f"unknown config key {key!r} in override")
        merged[key] = value

    sections = {"train": {}, "vit": {}, "data": {}, "run": {}}
    for key, value in merged.items():
        section, attr, ftype = _KEYMAP[key]
        caster = _TYPES.get(str(ftype), str)
        try:
            sections[section][attr] = caster(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {ftype}") from exc

    train = TrainConfig(**sections["train"])
    vit_kw = dict(sections["vit"])
    vit_kw["dropout_rate"] = train.dropout
    vit_cfg = ViTConfig(**vit_kw)
    data = DataConfig(**sections["data"])
    return RunConfig(train=train, vit=vit_cfg, data=data, **sections["run"])


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    kv = parse_config_text(path.read_text(), source=str(path))
    return build_run_config(kv, overrides)


def save_config(path, run: RunConfig) -> None:
    lines = []
    for key, (section, attr, _) in _KEYMAP.items():
        obj = {"train": run.train, "vit": run.vit, "data": run.data, "run": run}[section]
        lines.append(f"{key} = {getattr(obj, attr)}")
    Path(path).write_text("\n".join(lines) + "\n")
