"""Structured L1-norm filter pruning across the U-Net skip topology.

Removing output filter ``k`` of a convolution removes feature map ``k``,
so every consumer of that map loses the matching input kernels. Feature
maps pass unchanged through batch norm, ReLU and pooling, and a
concatenation appends its second operand's channels after the first
operand's original channel count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .unet import ModelGraph, build, forward, validate

PRUNABLE = ("conv", "upconv")


class PruneError(ValueError):
    pass


@dataclass
class PrunePlan:
    kept_out: dict[str, list[int]]
    kept_in: dict[str, list[int]] = field(default_factory=dict)

    def to_json(self) -> str:
        layers = {k: {"kept_out": self.kept_out[k], "kept_in": self.kept_in.get(k, [])}
                  for k in self.kept_out}
        return json.dumps({"layers": layers}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PrunePlan":
        layers = json.loads(text)["layers"]
        return cls({k: list(v["kept_out"]) for k, v in layers.items()},
                   {k: list(v["kept_in"]) for k, v in layers.items()})


def filter_scores(w: np.ndarray, kind: str) -> np.ndarray:
    a = np.abs(w.astype(np.float64))
    if kind == "upconv":  # (ic, oc, 2, 2)
        return a.sum(axis=(0, 2, 3))
    return a.sum(axis=(1, 2, 3))


def score_filters(model: ModelGraph) -> dict[str, np.ndarray]:
    """L1 norm of each output filter's kernel weights (bias excluded)."""
    return {l.name: filter_scores(model.params[l.params[0]], l.kind) for l in model.conv_layers()}


def keep_count(out_channels: int, ratio: float) -> int:
    if not 0 <= ratio < 1:
        raise PruneError(f"prune ratio must be in [0, 1), got {ratio}")
    # round first so products like 0.3 * 10 do not ceil to 4
    k = math.ceil(round((1 - ratio) * out_channels, 9))
    if k < 1:
        raise PruneError(f"ratio {ratio} would remove all {out_channels} filters")
    return k


def select_filters(scores: np.ndarray, keep: int) -> list[int]:
    """Indices of the ``keep`` largest scores; ties favour the lower index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(order[:keep])


def propagate(model: ModelGraph, kept_out: dict[str, list[int]]) -> dict[str, list[int]]:
    """Map every layer output to the original channel indices that survive."""
    chans: dict[str, list[int]] = {"input": list(range(model.config.in_channels))}
    for l in model.layers:
        if l.kind in ("conv", "upconv", "output-conv"):
            chans[l.name] = kept_out.get(l.name, list(range(l.out_channels)))
        elif l.kind == "concat":
            a, b = l.inputs
            offset = model.layer(a).out_channels
            chans[l.name] = chans[a] + [offset + i for i in chans[b]]
        else:
            chans[l.name] = chans[l.inputs[0]]
    return chans


def plan_prune(model: ModelGraph, ratio: float | dict[str, float]) -> PrunePlan:
    """Keep ``ceil((1 - ratio) * out_channels)`` highest-L1 filters per layer.

    ``ratio`` is either one value for every prunable layer or a map from
    layer name to ratio (unlisted layers are kept whole). The output 1x1
    convolution never loses class outputs.
    """
    scores = score_filters(model)
    if isinstance(ratio, dict):
        unknown = set(ratio) - {l.name for l in model.conv_layers()}
        if unknown:
            raise PruneError(f"ratios given for unknown layers {sorted(unknown)}")
    kept_out: dict[str, list[int]] = {}
    for l in model.conv_layers():
        if l.kind == "output-conv":
            kept_out[l.name] = list(range(l.out_channels))
            continue
        r = ratio.get(l.name, 0.0) if isinstance(ratio, dict) else float(ratio)
        kept_out[l.name] = select_filters(scores[l.name], keep_count(l.out_channels, r))
    chans = propagate(model, kept_out)
    kept_in = {l.name: chans[l.inputs[0]] for l in model.conv_layers()}
    return PrunePlan(kept_out, kept_in)


def _check_plan(model: ModelGraph, plan: PrunePlan) -> None:
    for l in model.conv_layers():
        if l.name not in plan.kept_out:
            raise PruneError(f"plan does not cover layer {l.name}")
        kept = plan.kept_out[l.name]
        if not kept:
            raise PruneError(f"{l.name}: plan keeps no filters")
        if len(set(kept)) != len(kept) or min(kept) < 0 or max(kept) >= l.out_channels:
            raise PruneError(f"{l.name}: kept indices {kept} invalid for {l.out_channels} filters")
        if l.kind == "output-conv" and len(kept) != l.out_channels:
            raise PruneError(f"{l.name}: the output convolution cannot lose class outputs")
    expected = propagate(model, plan.kept_out)
    for l in model.conv_layers():
        if plan.kept_in and plan.kept_in.get(l.name) != expected[l.inputs[0]]:
            raise PruneError(f"{l.name}: kept input channels inconsistent with its producers")


def apply_prune(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    _check_plan(model, plan)
    chans = propagate(model, plan.kept_out)
    cfg = model.config.from_dict(model.config.to_dict())
    for l in model.layers:
        if l.kind in PRUNABLE:
            cfg.channels[l.name] = len(plan.kept_out[l.name])
    pruned = build(cfg, init=False)
    p = model.params
    for l in model.layers:
        if not l.params:
            continue
        out_idx = np.asarray(chans[l.name])
        in_idx = np.asarray(chans[l.inputs[0]])
        if l.kind == "bn":
            for k in l.params:
                pruned.params[k] = p[k][out_idx].copy()
            continue
        w, b = p[l.params[0]], p[l.params[1]]
        if l.kind == "upconv":
            pruned.params[l.params[0]] = w[in_idx][:, out_idx].copy()
        else:
            pruned.params[l.params[0]] = w[out_idx][:, in_idx].copy()
        pruned.params[l.params[1]] = b[out_idx].copy()
    validate(pruned)
    return pruned


def masked_model(model: ModelGraph, plan: PrunePlan) -> ModelGraph:
    """The original model with pruned filters zeroed (weights, biases, bn affine)."""
    m = model.copy()
    chans = propagate(model, plan.kept_out)
    for l in model.layers:
        if l.kind not in ("conv", "upconv", "bn"):
            continue
        drop = np.setdiff1d(np.arange(l.out_channels), chans[l.name])
        if not drop.size:
            continue
        if l.kind == "bn":
            m.params[l.params[0]][drop] = 0  # gamma
            m.params[l.params[1]][drop] = 0  # beta
        elif l.kind == "upconv":
            m.params[l.params[0]][:, drop] = 0
            m.params[l.params[1]][drop] = 0
        else:
            m.params[l.params[0]][drop] = 0
            m.params[l.params[1]][drop] = 0
    return m


def verify_prune_equivalence(model: ModelGraph, pruned: ModelGraph, plan: PrunePlan, x) -> float:
    """Max abs logit difference between ``pruned`` and the masked original."""
    ref = forward(masked_model(model, plan), x)
    out = forward(pruned, x)
    return float(np.max(np.abs(ref.astype(np.float64) - out.astype(np.float64))))
