"""Pipeline configuration: one JSON document with optional sections.

Missing sections and keys fall back to the defaults below::

    {"grid": {...}, "taxonomy": [[name, kind], ...], "scene": {...},
     "dataset": {...}, "detections": {...}, "train": {...}, "loss": {...},
     "ics": {...}, "panoptic": {...}}
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .ics import IcsParams
from .synth import DetectionNoise, SceneConfig, ThingSpec
from .trainer import TrainConfig
from .types import DEFAULT_TAXONOMY, ClassTaxonomy, LossWeights
from .voxel import GridSpec

DEFAULT_GRID = GridSpec(origin=(-20.0, -20.0, -1.0), voxel_size=(0.5, 0.5, 8.0), dims=(1, 80, 80))


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n_train: int = 20
    n_val: int = 5
    seed: int = 0
    val_stream_offset: int = 100_000  # validation scenes use disjoint generator streams
    point_label_noise: float = 0.1  # corruption rate of stand-in semantic predictions
    point_score_beta: tuple[float, float] = (4.0, 2.0)


@dataclass(frozen=True)
class PanopticConfig:
    require_class_match: bool = True


@dataclass(frozen=True)
class Config:
    grid: GridSpec = DEFAULT_GRID
    taxonomy: ClassTaxonomy = DEFAULT_TAXONOMY
    scene: SceneConfig = SceneConfig()
    dataset: DatasetConfig = DatasetConfig()
    detections: DetectionNoise = DetectionNoise()
    train: TrainConfig = TrainConfig()
    loss_weights: LossWeights = LossWeights()
    ics: IcsParams = IcsParams()
    panoptic: PanopticConfig = PanopticConfig()

    def to_doc(self) -> dict:
        def conv(obj):
            if isinstance(obj, ClassTaxonomy):
                return [list(c) for c in obj.classes]
            if dataclasses.is_dataclass(obj):
                return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.name != "taxonomy"}
            if isinstance(obj, (list, tuple)):
                return [conv(v) for v in obj]
            return obj

        doc = {name: conv(getattr(self, name)) for name in self.__dataclass_fields__}
        doc["loss"] = doc.pop("loss_weights")
        doc["loss"]["lambda_lovasz"] = self.train.lambda_lovasz
        doc["loss"]["class_weight"] = self.train.class_weight
        return doc


def _build(cls, section: Any, where: str, **extra):
    if section is None:
        section = {}
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in section:
            v = section[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    kwargs.update(extra)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def config_from_doc(doc: dict) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = {"grid", "taxonomy", "scene", "dataset", "detections", "train", "loss", "ics", "panoptic"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    try:
        taxonomy = ClassTaxonomy(tuple(tuple(c) for c in doc["taxonomy"])) if "taxonomy" in doc else DEFAULT_TAXONOMY
    except (TypeError, ValueError) as e:
        raise ConfigError(f"taxonomy: {e}") from None

    scene_doc = dict(doc.get("scene") or {})
    if "things" in scene_doc:
        scene_doc["things"] = [
            _build(ThingSpec, t, f"scene.things[{i}]") for i, t in enumerate(scene_doc["things"])
        ]
    scene = _build(SceneConfig, scene_doc, "scene", taxonomy=taxonomy)

    loss_doc = dict(doc.get("loss") or {})
    train_doc = dict(doc.get("train") or {})
    for key in ("lambda_lovasz", "class_weight"):
        if key in loss_doc:
            train_doc[key] = loss_doc.pop(key)
    return Config(
        grid=_build(GridSpec, doc.get("grid"), "grid") if "grid" in doc else DEFAULT_GRID,
        taxonomy=taxonomy,
        scene=scene,
        dataset=_build(DatasetConfig, doc.get("dataset"), "dataset"),
        detections=_build(DetectionNoise, doc.get("detections"), "detections"),
        train=_build(TrainConfig, train_doc, "train"),
        loss_weights=_build(LossWeights, loss_doc, "loss"),
        ics=_build(IcsParams, doc.get("ics"), "ics"),
        panoptic=_build(PanopticConfig, doc.get("panoptic"), "panoptic"),
    )


def load_config(path: Optional[str]) -> Config:
    if path is None:
        return Config()
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON at byte {e.pos}: {e.msg}") from None
    return config_from_doc(doc)
