"""Run configuration: one JSON file with a section per module.

Command-line ``--set section.key=value`` overrides are applied by dotted
path before validation. The resolved config and its hash are written next
to every command's outputs.
"""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError, ValidationError
from .peft import PlacementSpec
from .sampler import SamplerConfig
from .trainer import TrainStageConfig

TRAIN_MODES = ("dual_stage", "one_stage", "stage1_only")

DEFAULTS = {
    "seed": 0,
    "backbone": BackboneConfig().to_dict(),
    "peft": {"placement": "5", "ratio": 4, "activation": "gelu", "gamma0_per_channel": False},
    "trainer": {
        "mode": "dual_stage",
        "stage1": {"steps": 400, "learning_rate": 5e-5, "batch_size": 1, "delta": 1.0},
        "stage2": {"steps": 70, "learning_rate": 1e-5, "batch_size": 1, "delta": 1.0},
        "one_stage": {"steps": 400, "learning_rate": 5e-5, "batch_size": 1, "delta": 1.0},
    },
    "sampler": {"num_steps": 50, "guidance_scale": 7.5},
    "metrics": {"embedder": "projection-stub", "flow": "block-matching", "clip_frame_pairs": "consecutive"},
    "dataset": {
        "motion_threshold": 4.0,
        "cut_threshold": 0.25,
        "annotation": {"client": "stub", "endpoint": None, "timeout": 30.0, "retries": 3},
    },
    "paths": {"manifest": "manifest.jsonl"},
}


def _merge(base, over, where=""):
    for key, value in over.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a section")
            _merge(base[key], value, path)
        else:
            base[key] = value
    return base


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key.path=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(raw)
    return cfg


class RunConfig:
    """Resolved, validated configuration."""

    def __init__(self, data):
        self.data = data
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=()):
        data = copy.deepcopy(DEFAULTS)
        if path:
            try:
                user = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            _merge(data, user)
        for ov in overrides:
            apply_override(data, ov)
        return cls(data)

    def validate(self):
        try:
            self.backbone
            self.placement
            self.stage_configs()
            self.sampler
        except (ConfigError, ValidationError):
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if self.data["trainer"]["mode"] not in TRAIN_MODES:
            raise ConfigError(f"trainer.mode must be one of {TRAIN_MODES}")
        if self.data["metrics"]["clip_frame_pairs"] not in ("consecutive", "all"):
            raise ConfigError("metrics.clip_frame_pairs must be 'consecutive' or 'all'")

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def backbone(self):
        return BackboneConfig(**{**self.data["backbone"], "seed": self.seed})

    @property
    def placement(self):
        p = self.data["peft"]["placement"]
        if isinstance(p, (list, tuple)):
            return PlacementSpec(frozenset(p))
        return PlacementSpec.parse(p)

    def stage_configs(self):
        tr = self.data["trainer"]
        return {
            "stage1": TrainStageConfig(stage="stage1", seed=self.seed, **tr["stage1"]),
            "stage2": TrainStageConfig(stage="stage2", seed=self.seed + 1, **tr["stage2"]),
            "one_stage": TrainStageConfig(stage="one_stage", seed=self.seed, **tr["one_stage"]),
        }

    @property
    def sampler(self):
        return SamplerConfig(total_steps=self.backbone.timesteps, **self.data["sampler"])

    def to_json(self):
        return json.dumps(self.data, sort_keys=True, indent=2)

    @property
    def hash(self):
        canon = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def write(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "config.json").write_text(self.to_json() + "\n")
        (directory / "config.hash").write_text(self.hash + "\n")
