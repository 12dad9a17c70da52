"""U-Net layer graph: construction, float forward pass and summaries.

A model is an ordered list of :class:`Layer` records plus a flat parameter
store. Each layer names the layers it reads from (``"input"`` is the network
input), so the list doubles as a topologically sorted DAG. Encoder level
``i`` produces ``enc{i}.relu2``, which feeds both ``enc{i}.pool`` and the
skip concatenation ``dec{i}.cat``.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
# Parameter suffixes updated by the optimizer (running statistics are not).
TRAINABLE_SUFFIXES = ("weight", "bias", "gamma", "beta")


class ConfigError(ValueError):
    pass


@dataclass
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 2
    depth: int = 4
    filters: tuple[int, ...] = (64, 128, 256, 512, 512)
    seed: int = 0
    batchnorm: bool = True
    # Per-layer output channel overrides, written by the pruner.
    channels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.channels = {str(k): int(v) for k, v in self.channels.items()}
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.filters) != self.depth + 1:
            raise ConfigError(
                f"filters needs depth+1 = {self.depth + 1} entries, got {len(self.filters)}"
            )
        if min(self.filters) < 1 or any(v < 1 for v in self.channels.values()):
            raise ConfigError("every filter count must be >= 1")
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be >= 1")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filters"] = list(self.filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # conv | bn | relu | maxpool | upconv | concat | output-conv
    inputs: tuple[str, ...]
    params: tuple[str, ...] = ()
    in_channels: int = 0
    out_channels: int = 0


@dataclass
class ModelGraph:
    config: UNetConfig
    layers: list[Layer]
    params: dict[str, np.ndarray]

    def layer(self, name: str) -> Layer:
        for lyr in self.layers:
            if lyr.name == name:
                return lyr
        raise KeyError(name)

    def conv_layers(self) -> list[Layer]:
        return [l for l in self.layers if l.kind in ("conv", "upconv", "output-conv")]

    def consumers(self, name: str) -> list[Layer]:
        return [l for l in self.layers if name in l.inputs]

    def trainable(self) -> list[str]:
        return [k for k in self.params if k.rsplit(".", 1)[-1] in TRAINABLE_SUFFIXES]

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            copy.deepcopy(self.config),
            list(self.layers),
            {k: v.copy() for k, v in self.params.items()},
        )

    def astype(self, dtype) -> "ModelGraph":
        m = self.copy()
        m.params = {k: v.astype(dtype) for k, v in m.params.items()}
        return m


def _layout(config: UNetConfig) -> list[Layer]:
    """Enumerate layers with channel counts resolved from the config."""
    cfg = config
    layers: list[Layer] = []
    width = {"input": cfg.in_channels}

    def ch(name: str, level: int) -> int:
        return cfg.channels.get(name, cfg.filters[level])

    def add(name, kind, inputs, params=(), out=None):
        cin = sum(width[i] for i in inputs)
        cout = cin if out is None else out
        layers.append(Layer(name, kind, tuple(inputs), tuple(f"{name}.{p}" for p in params), cin, cout))
        width[name] = cout
        return name

    def double_conv(prefix, src, level):
        for k in (1, 2):
            src = add(f"{prefix}.conv{k}", "conv", [src], ("weight", "bias"), ch(f"{prefix}.conv{k}", level))
            if cfg.batchnorm:
                src = add(f"{prefix}.bn{k}", "bn", [src], ("gamma", "beta", "running_mean", "running_var"))
            src = add(f"{prefix}.relu{k}", "relu", [src])
        return src

    src = "input"
    skips = []
    for i in range(cfg.depth):
        src = double_conv(f"enc{i}", src, i)
        skips.append(src)
        src = add(f"enc{i}.pool", "maxpool", [src])
    src = double_conv("mid", src, cfg.depth)
    for i in reversed(range(cfg.depth)):
        up = add(f"dec{i}.up", "upconv", [src], ("weight", "bias"), ch(f"dec{i}.up", i))
        src = add(f"dec{i}.cat", "concat", [skips[i], up])
        src = double_conv(f"dec{i}", src, i)
    add("head", "output-conv", [src], ("weight", "bias"), cfg.num_classes)
    return layers


def param_shapes(layers: list[Layer]) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for l in layers:
        if l.kind == "conv":
            shapes[l.params[0]] = (l.out_channels, l.in_channels, 3, 3)
        elif l.kind == "output-conv":
            shapes[l.params[0]] = (l.out_channels, l.in_channels, 1, 1)
        elif l.kind == "upconv":
            shapes[l.params[0]] = (l.in_channels, l.out_channels, 2, 2)
        elif l.kind == "bn":
            for p in l.params:
                shapes[p] = (l.out_channels,)
            continue
        else:
            continue
        shapes[l.params[1]] = (l.out_channels,)
    return shapes


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def build(config: UNetConfig, init: bool = True) -> ModelGraph:
    """Build a model with He-normal conv weights seeded per parameter name.

    Biases start at zero; batch-norm layers start as the identity
    (gamma 1, beta 0, running mean 0, running variance 1).
    """
    config.validate()
    layers = _layout(config)
    params: dict[str, np.ndarray] = {}
    upconv_weights = {l.params[0] for l in layers if l.kind == "upconv"}
    for name, shape in param_shapes(layers).items():
        suffix = name.rsplit(".", 1)[-1]
        if suffix in ("gamma", "running_var"):
            params[name] = np.ones(shape, np.float32)
        elif suffix == "weight" and init:
            # a stride-2 2x2 up-conv output pixel sees exactly in_channels inputs
            fan_in = shape[0] if name in upconv_weights else int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = (_rng_for(config.seed, name).standard_normal(shape) * std).astype(np.float32)
        else:
            params[name] = np.zeros(shape, np.float32)
    return ModelGraph(copy.deepcopy(config), layers, params)


def validate(model: ModelGraph) -> None:
    """Check that every parameter exists with the shape its layer requires."""
    expected = param_shapes(model.layers)
    missing = expected.keys() - model.params.keys()
    extra = model.params.keys() - expected.keys()
    if missing or extra:
        raise ConfigError(f"parameter store mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for name, shape in expected.items():
        if model.params[name].shape != shape:
            raise ConfigError(f"{name}: shape {model.params[name].shape}, layer requires {shape}")


def check_input(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    x = T.check4d(x, "input")
    cfg = model.config
    if x.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")
    m = cfg.multiple
    if x.shape[2] % m or x.shape[3] % m:
        raise T.ShapeError(
            f"input height and width must be multiples of {m} (2^depth), got {x.shape[2]}x{x.shape[3]}"
        )
    return x


def forward(model: ModelGraph, x: np.ndarray, *, training: bool = False,
            update_stats: bool = False, cache: dict | None = None,
            taps: dict | None = None) -> np.ndarray:
    """Run the graph and return logits of shape ``(n, num_classes, h, w)``.

    In training mode batch norm normalizes with batch statistics; with
    ``update_stats`` the running statistics move toward them (momentum 0.1).
    ``cache`` receives what the backward pass needs; ``taps`` receives every
    layer output by name.
    """
    x = check_input(model, x)
    p = model.params
    act: dict[str, np.ndarray] = {"input": x}
    for l in model.layers:
        src = act[l.inputs[0]]
        if l.kind in ("conv", "output-conv"):
            pad = 1 if l.kind == "conv" else 0
            y = T.conv2d(src, p[l.params[0]], p[l.params[1]], padding=pad, layer=l.name)
        elif l.kind == "bn":
            gamma, beta, rmean, rvar = (p[k] for k in l.params)
            if training:
                y, xhat, inv_std, mu, var = _bn_train(src, gamma, beta)
                if cache is not None:
                    cache[l.name] = (xhat, inv_std)
                if update_stats:
                    n = src.shape[0] * src.shape[2] * src.shape[3]
                    unbiased = var * n / max(n - 1, 1)
                    p[l.params[2]] = ((1 - BN_MOMENTUM) * rmean + BN_MOMENTUM * mu).astype(rmean.dtype)
                    p[l.params[3]] = ((1 - BN_MOMENTUM) * rvar + BN_MOMENTUM * unbiased).astype(rvar.dtype)
            else:
                y = T.batchnorm_infer(src, gamma, beta, rmean, rvar, BN_EPS, layer=l.name)
        elif l.kind == "relu":
            y = T.relu(src)
        elif l.kind == "maxpool":
            y, idx = T.maxpool2d(src)
            if cache is not None:
                cache[l.name] = idx
        elif l.kind == "upconv":
            y = T.conv_transpose2d(src, p[l.params[0]], p[l.params[1]], layer=l.name)
        elif l.kind == "concat":
            y = T.concat_channels(src, act[l.inputs[1]])
        else:
            raise ConfigError(f"unknown layer kind {l.kind!r}")
        act[l.name] = y
    if cache is not None:
        cache["_act"] = act
    if taps is not None:
        taps.update(act)
    return act[model.layers[-1].name]


def _bn_train(x, gamma, beta):
    xd = x.astype(np.float64)
    mu = xd.mean(axis=(0, 2, 3))
    var = xd.var(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = xhat * np.asarray(gamma, np.float64)[None, :, None, None] + np.asarray(beta, np.float64)[None, :, None, None]
    return y.astype(x.dtype), xhat, inv_std, mu, var


def predict_mask(model: ModelGraph, x: np.ndarray) -> np.ndarray:
    """Argmax over classes; returns ``(n, h, w)`` uint8."""
    logits = forward(model, x)
    return logits.argmax(axis=1).astype(np.uint8)


def summarize(model: ModelGraph, input_hw: tuple[int, int] = (240, 320)) -> dict:
    h, w = input_hw
    size = {"input": (h, w)}
    layers = []
    macs = 0
    for l in model.layers:
        hw = size[l.inputs[0]]
        if l.kind == "maxpool":
            hw = (hw[0] // 2, hw[1] // 2)
        elif l.kind == "upconv":
            hw = (hw[0] * 2, hw[1] * 2)
        size[l.name] = hw
        shapes = {k: list(model.params[k].shape) for k in l.params}
        if l.kind in ("conv", "output-conv", "upconv"):
            wshape = model.params[l.params[0]].shape
            per_out = int(np.prod(wshape)) // l.out_channels
            if l.kind == "upconv":
                # every output pixel sees in_channels products
                per_out = l.in_channels
            macs += per_out * l.out_channels * hw[0] * hw[1]
        layers.append({"name": l.name, "kind": l.kind, "out_channels": l.out_channels,
                       "out_hw": list(hw), "params": shapes})
    return {
        "param_count": int(sum(v.size for v in model.params.values())),
        "macs": int(macs),
        "input_hw": [h, w],
        "layers": layers,
    }
