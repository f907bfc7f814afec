"""Run configuration: one YAML/JSON file with ``backbone``, ``prompts``, ``train`` and ``eval`` blocks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .encoder import BackboneConfig, mock_config
from .errors import AssetError, FormatError
from .evaluation import EvalConfig
from .training import TrainConfig


@dataclass
class PromptConfig:
    n_tokens: int = 8
    init_std: float = 0.02


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict[str, Any]:
        return {
            "backbone": self.backbone.to_dict(),
            "prompts": {"n_tokens": self.prompts.n_tokens, "init_std": self.prompts.init_std},
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }

    def write_snapshot(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def read_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise AssetError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: top level must be a mapping")
    unknown = sorted(set(data) - {"backbone", "prompts", "train", "eval"})
    if unknown:
        raise FormatError(f"{path}: unknown sections {unknown}")
    return data


def _block(raw: dict[str, Any], name: str, cls):
    block = raw.get(name) or {}
    unknown = sorted(set(block) - set(cls.__dataclass_fields__))
    if unknown:
        raise FormatError(f"unknown keys in {name!r} block: {unknown}")
    return block


def build_run_config(raw: dict[str, Any], overrides: dict[str, dict[str, Any]] | None = None) -> RunConfig:
    """Merge the file contents with command-line overrides (``{section: {key: value}}``)."""
    overrides = overrides or {}
    sections = {}
    for name, cls in (("backbone", BackboneConfig), ("prompts", PromptConfig), ("train", TrainConfig), ("eval", EvalConfig)):
        block = dict(_block(raw, name, cls))
        block.update({k: v for k, v in overrides.get(name, {}).items() if v is not None})
        sections[name] = block
    bb = sections["backbone"]
    if bb.get("name") == "mock":
        backbone = mock_config(**{k: v for k, v in bb.items() if k != "name"})
    else:
        backbone = BackboneConfig(**bb)
    return RunConfig(
        backbone=backbone,
        prompts=PromptConfig(**sections["prompts"]),
        train=TrainConfig(**sections["train"]),
        eval=EvalConfig(**sections["eval"]),
    )
