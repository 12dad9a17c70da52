"""Run configuration: one JSON document governing a full run.

Missing sections fall back to :data:`DEFAULTS`. The document is checked
against ``runconfig.schema.json`` before any work starts.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .trainer import TrainConfig
from .unet import UNetConfig

DEFAULTS: dict = {
    "seed": 0,
    "paths": {"data": "data", "out": "out"},
    "data": {"width": 320, "height": 240, "n": 200, "split_fraction": 0.8,
             "split_by": "image", "polarity": "white"},
    "model": {"in_channels": 1, "num_classes": 2, "depth": 4, "filters": [64, 128, 256, 512, 512]},
    "train": {"learning_rate": 1e-4, "epochs": 350, "batch_size": 5, "split_fraction": 0.8,
              "betas": [0.9, 0.999], "eps": 1e-8},
    "prune": {"ratio": 0.9, "per_layer": {}},
    "finetune": {"epochs": 50},
    "quant": {"calibration_split": "train", "max_calibration_images": 64, "f_offset": 0},
    "pipeline": {"capacity": 4, "infer_workers": 1, "frames": 200, "warmup": 0},
}


class ConfigValidationError(ValueError):
    pass


def schema() -> dict:
    return json.loads(resources.files("edgeseg").joinpath("runconfig.schema.json").read_text())


def validate(doc: dict) -> None:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigValidationError(f"run config invalid at {where}: {e.message}") from None


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "per_layer":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load(path: str | Path | None) -> dict:
    doc: dict = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigValidationError(f"{path}: not valid JSON ({e})") from None
    validate(doc)
    cfg = merge(DEFAULTS, doc)
    validate(cfg)
    return cfg


def unet_config(cfg: dict) -> UNetConfig:
    m = cfg["model"]
    return UNetConfig(in_channels=m["in_channels"], num_classes=m["num_classes"], depth=m["depth"],
                      filters=tuple(m["filters"]), seed=m.get("seed", cfg["seed"]))


def train_config(cfg: dict, finetune: bool = False) -> TrainConfig:
    t = dict(cfg["train"])
    if finetune:
        t["epochs"] = cfg["finetune"]["epochs"]
        t["learning_rate"] = cfg["finetune"].get("learning_rate", t["learning_rate"])
    return TrainConfig(learning_rate=t["learning_rate"], epochs=t["epochs"], batch_size=t["batch_size"],
                       split_fraction=t["split_fraction"], betas=tuple(t["betas"]), eps=t["eps"],
                       seed=cfg["seed"])
