"""
Run configuration: a flat ``key=value`` file with dotted section keys.

    seed=3
    scene.scenes=50
    model.layers=2
    train.batch_size=16
    paths.data=runs/data

Sections map onto :class:`SceneConfig`, :class:`ModelConfig` and
:class:`TrainConfig`; the top-level ``seed`` feeds both the generator and the
trainer, and ``model.views`` / ``model.classes`` follow the scene.  Every key
is checked against the schema and unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from . import kv
from .data import SceneConfig
from .errors import ConfigError, ContractError
from .model import ModelConfig
from .train import TrainConfig

# desk-scale benchmark preset, applied under any file or command-line values
DESK_PRESET = {
    "model.channels": "32",
    "model.patch": "4",
    "model.layers": "2",
    "model.heads": "4",
    "train.batch_size": "16",
    "train.epochs": "10",
    "train.lr0": "4e-3",
    "train.eval_every_epoch": "false",
}

_DERIVED = {"scene.seed", "train.seed", "model.views", "model.classes"}


@dataclass
class Paths:
    data: str = "data"


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    def items(self):
        """Resolved ``(key, text)`` pairs in schema order."""
        out = [("seed", kv.format_value(self.seed))]
        for section, obj in self._sections():
            for f in fields(obj):
                key = f"{section}.{f.name}"
                if key not in _DERIVED:
                    out.append((key, kv.format_value(getattr(obj, f.name))))
        return out

    def _sections(self):
        return (("scene", self.scene), ("model", self.model), ("train", self.train), ("paths", self.paths))

    def dumps(self):
        return "".join(f"{k}={v}\n" for k, v in self.items())


def schema():
    """Key -> default value for every accepted key."""
    keys = {"seed": 0}
    for section, cls in (("scene", SceneConfig), ("model", ModelConfig), ("train", TrainConfig), ("paths", Paths)):
        default = cls()
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key not in _DERIVED:
                keys[key] = getattr(default, f.name)
    return keys


def read_config_file(path):
    return kv.read_file(path)


def resolve(*layers, preset=DESK_PRESET):
    """
    Merge raw ``{key: text}`` layers (later wins) over the preset and the
    dataclass defaults, validate every key and build a RunConfig.
    """
    known = schema()
    merged = dict(preset or {})
    for layer in layers:
        for key in layer:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        merged.update(layer)
    values = {key: kv.parse_value(key, text, known[key]) for key, text in merged.items()}
    seed = values.get("seed", 0)
    sections = {"scene": {}, "model": {}, "train": {}, "paths": {}}
    for key, value in values.items():
        if key != "seed":
            section, name = key.split(".", 1)
            sections[section][name] = value
    try:
        scene = SceneConfig(seed=seed, **sections["scene"])
        model = ModelConfig(views=scene.views, classes=scene.classes, **sections["model"])
        train = TrainConfig(seed=seed, **sections["train"])
    except (ContractError, TypeError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(seed, scene, model, train, Paths(**sections["paths"]))


def with_seed(config, seed):
    """Same run with every seeded component moved to ``seed``."""
    return replace(config, seed=seed, scene=replace(config.scene, seed=seed),
                   train=replace(config.train, seed=seed))
