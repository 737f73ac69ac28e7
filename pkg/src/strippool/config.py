"""Run configuration: one JSON document holding the model, scene and schedule."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .data import SyntheticSceneSpec
from .network import PRESETS, NetworkSpec, preset_spec
from .tensor import ConfigError
from .train import TrainConfig

REQUIRED = ("model", "train")


@dataclass
class RunConfig:
    # a preset name, or a full network spec object
    model: str | dict
    train: TrainConfig
    scene: SyntheticSceneSpec = field(default_factory=SyntheticSceneSpec)
    train_size: int = 256
    test_size: int = 64

    def network_spec(self) -> NetworkSpec:
        if isinstance(self.model, str):
            return preset_spec(self.model, "toy", self.scene.num_classes)
        spec = NetworkSpec.from_dict(self.model)
        if spec.head.num_classes != self.scene.num_classes:
            raise ConfigError(f"model.head.num_classes={spec.head.num_classes} but "
                              f"scene.num_classes={self.scene.num_classes}")
        return spec

    def validate(self):
        if isinstance(self.model, str) and self.model not in PRESETS:
            raise ConfigError(f"model: unknown preset {self.model!r}; choose from {', '.join(PRESETS)}")
        if not isinstance(self.model, (str, dict)):
            raise ConfigError("model must be a preset name or a network spec object")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("train_size and test_size must be positive")
        self.train.validate()
        self.scene.validate()
        if self.train.crop_size > self.scene.size * self.train.scale_range[1]:
            raise ConfigError(f"train.crop_size {self.train.crop_size} exceeds the largest scaled canvas")
        self.network_spec()
        return self

    def to_dict(self) -> dict:
        scene = asdict(self.scene)
        scene["band_width"] = list(self.scene.band_width)
        scene["blob_size"] = list(self.scene.blob_size)
        model = self.model if isinstance(self.model, str) else NetworkSpec.from_dict(self.model).to_dict()
        return {"model": model, "train": self.train.to_dict(), "scene": scene,
                "train_size": self.train_size, "test_size": self.test_size}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> RunConfig:
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        for name in REQUIRED:
            if name not in d:
                raise ConfigError(f"config: missing required field '{name}'")
        known = {f.name for f in fields(cls)}
        extra = sorted(set(d) - known)
        if extra:
            raise ConfigError(f"config: unknown field(s) {', '.join(extra)}")
        if not isinstance(d["train"], dict):
            raise ConfigError("config.train must be an object")
        scene_d = dict(d.get("scene", {}))
        scene_known = {f.name for f in fields(SyntheticSceneSpec)}
        extra = sorted(set(scene_d) - scene_known)
        if extra:
            raise ConfigError(f"scene: unknown field(s) {', '.join(extra)}")
        for key in ("band_width", "blob_size"):
            if key in scene_d:
                scene_d[key] = tuple(scene_d[key])
        try:
            cfg = cls(model=d["model"], train=TrainConfig.from_dict(d["train"]),
                      scene=SyntheticSceneSpec(**scene_d),
                      train_size=int(d.get("train_size", 256)), test_size=int(d.get("test_size", 64)))
        except TypeError as e:
            raise ConfigError(f"config: {e}") from e
        return cfg.validate()

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(d)


def seed_override(default: int) -> int:
    """SPNET_SEED wins over the configured seed when set."""
    raw = os.environ.get("SPNET_SEED")
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigError(f"SPNET_SEED must be an integer, got {raw!r}") from e
