"""Run configuration: TOML file sections merged with command-line overrides.

File layout::

    seed = 1
    preset = "desk"

    [pretrain]      # PretrainConfig fields
    strategy = "muleeg"
    epochs = 10

    [augment]       # AugmentationConfig fields
    jitter_ratio = 0.1

    [eval]          # EvalConfig fields
    linear_epochs = 200

    [data]
    cache = "data/synth"
    split = "data/split.json"
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .evaluate import EvalConfig
from .pretrain import ConfigError, PretrainConfig
from .transforms import AugmentationConfig

DATA_ROOT_ENV = "MULEEG_DATA_ROOT"


def load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _pick(cls, values: dict, section: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return dict(values)


@dataclass
class RunConfig:
    pretrain: PretrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pretrain": self.pretrain.to_dict(), "eval": self.eval.to_dict(), "data": dict(self.data)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.effective.json"
        path.write_text(json.dumps({**self.to_dict(), "config_hash": self.config_hash()}, indent=2, sort_keys=True))
        return path


def build_run_config(file_values: Optional[dict] = None, *, pretrain: Optional[dict] = None,
                     augment: Optional[dict] = None, eval: Optional[dict] = None,
                     data: Optional[dict] = None, seed: Optional[int] = None,
                     preset: Optional[str] = None) -> RunConfig:
    """Merge file values with overrides (overrides win; ``None`` means 'not given')."""
    file_values = dict(file_values or {})

    def merged(section: str, override: Optional[dict]) -> dict:
        out = dict(file_values.get(section, {}))
        out.update({k: v for k, v in (override or {}).items() if v is not None})
        return out

    seed = seed if seed is not None else file_values.get("seed")
    preset = preset or file_values.get("preset", "desk")

    p = merged("pretrain", pretrain)
    a = _pick(AugmentationConfig, merged("augment", augment), "augment")
    e = merged("eval", eval)
    if seed is not None:
        p["seed"] = a["seed"] = e["seed"] = int(seed)
    strategy = p.pop("strategy", "muleeg")
    p = _pick(PretrainConfig, p, "pretrain")
    p.pop("preset", None)
    pre = PretrainConfig.for_preset(preset, strategy, augment=AugmentationConfig(**a), **p)
    pre.augment.validate()
    ev = EvalConfig(**_pick(EvalConfig, e, "eval"))
    return RunConfig(pre, ev, merged("data", data))


def resolve_data_path(path) -> Path:
    """Relative paths that do not exist locally are looked up under ``$MULEEG_DATA_ROOT``."""
    path = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not path.is_absolute() and not path.exists() and root:
        return Path(root) / path
    return path


def parse_id_list(value: Any) -> Optional[list[str]]:
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    value = str(value).strip()
    if value.startswith("@"):
        value = Path(value[1:]).read_text()
    return [v for v in (s.strip() for s in value.replace("\n", ",").split(",")) if v]
