"""Batch-norm folding and 8-bit power-of-two fixed-point inference.

A value ``q`` stored with ``f`` fraction bits represents ``q * 2**-f``.
Weights get one ``f`` per output channel, activations one per tensor.
A convolution multiplies int8 operands into a wide accumulator whose
scale is ``2**-(f_in + f_w)``; biases are pre-scaled to that accumulator
scale. The result is brought to the output scale with a rounding
arithmetic right shift, clamped to int8, and passed through ReLU when the
layer has one.

Integer convolutions run through the float64 kernels in ``tensor``. Every
product and partial sum is an integer below 2**53, so the result is exact.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import weightfile
from .unet import BN_EPS, ModelGraph, UNetConfig, build, check_input, forward, validate

log = logging.getLogger(__name__)

QMIN, QMAX = -128, 127
F_MIN, F_MAX = -16, 16
INT32_MIN, INT32_MAX = -(2 ** 31), 2 ** 31 - 1


class QuantizationError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuantParams:
    fraction_bits: int

    @property
    def scale(self) -> float:
        return 2.0 ** -self.fraction_bits


# --- scalar rules -----------------------------------------------------------

def choose_qparams(max_abs: float) -> QuantParams:
    """Largest ``f`` in [-16, 16] with ``max_abs <= 127 * 2**-f``."""
    if max_abs < 0:
        raise ValueError("max_abs must be >= 0")
    for f in range(F_MAX, F_MIN - 1, -1):
        if max_abs <= QMAX * 2.0 ** -f:
            return QuantParams(f)
    return QuantParams(F_MIN)


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(x, f: int) -> np.ndarray:
    return np.clip(round_half_away(np.asarray(x, np.float64) * 2.0 ** f), QMIN, QMAX).astype(np.int8)


def dequantize(q, f: int) -> np.ndarray:
    return np.asarray(q, np.float64) * 2.0 ** -f


def rounding_shift(v, s):
    """``floor((v + 2**(s-1)) / 2**s)`` for ``s >= 1``; exact left shift for ``s <= 0``.

    ``s`` may be a scalar or broadcast against ``v`` (per-channel shifts).
    """
    v = np.asarray(v, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    right = np.maximum(s, 0)
    half = np.where(right > 0, np.left_shift(np.int64(1), np.maximum(right - 1, 0)), 0)
    shifted = np.right_shift(v + half, right)
    return np.where(s > 0, shifted, np.left_shift(v, np.maximum(-s, 0)))


# --- folding and calibration -----------------------------------------------

def fold_conv_bn(w, b, gamma, beta, mean, var, eps: float = BN_EPS):
    """``w' = w * s`` and ``b' = (b - mean) * s + beta`` with ``s = gamma / sqrt(var + eps)``."""
    scale = np.asarray(gamma, np.float64) / np.sqrt(np.asarray(var, np.float64) + eps)
    w = np.asarray(w, np.float64) * scale[:, None, None, None]
    b = (np.asarray(b, np.float64) - np.asarray(mean, np.float64)) * scale + np.asarray(beta, np.float64)
    return w, b


def fold_batchnorm(model: ModelGraph) -> ModelGraph:
    """Absorb every inference-mode batch norm into the convolution before it."""
    if not model.config.batchnorm:
        return model.copy()
    for l in model.layers:
        if l.kind == "bn":
            prev = model.layer(l.inputs[0])
            if prev.kind != "conv":
                raise QuantizationError(f"{l.name}: batch norm must follow a convolution, found {prev.kind}")
    cfg = UNetConfig.from_dict({**model.config.to_dict(), "batchnorm": False})
    folded = build(cfg, init=False)
    p = model.params
    for l in model.layers:
        if l.kind in ("conv", "upconv", "output-conv"):
            folded.params[l.params[0]] = p[l.params[0]].copy()
            folded.params[l.params[1]] = p[l.params[1]].copy()
    for l in model.layers:
        if l.kind != "bn":
            continue
        conv = model.layer(l.inputs[0])
        w, b = fold_conv_bn(p[conv.params[0]], p[conv.params[1]], *(p[k] for k in l.params))
        folded.params[conv.params[0]] = w.astype(np.float32)
        folded.params[conv.params[1]] = b.astype(np.float32)
    validate(folded)
    return folded


def calibrate(folded: ModelGraph, images, batch_size: int = 8) -> dict[str, float]:
    """Max |value| seen on the input and on every layer output."""
    imgs = [np.asarray(i, np.float32) for i in images]
    if not imgs:
        raise ValueError("calibration needs at least one image")
    profile: dict[str, float] = {}
    for s in range(0, len(imgs), batch_size):
        x = np.stack([i if i.ndim == 3 else i[None] for i in imgs[s:s + batch_size]])
        taps: dict = {}
        forward(folded, x, taps=taps)
        for name, a in taps.items():
            profile[name] = max(profile.get(name, 0.0), float(np.max(np.abs(a))))
    return profile


# --- quantized model --------------------------------------------------------

@dataclass
class QModel:
    """Folded graph with int8 weights, int32 biases and fraction bits.

    ``act_bits`` covers the input (key ``"input"``) and every conv,
    up-conv and head output; ReLU and max-pool outputs share the scale of
    the tensor they read, and both operands of a concatenation share one.
    """

    config: UNetConfig
    layers: list
    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    weight_bits: dict[str, np.ndarray]
    act_bits: dict[str, int]
    fused_relu: dict[str, bool] = field(default_factory=dict)

    def edge_of(self, name: str) -> str:
        """Name of the quantized tensor whose scale a layer output carries."""
        while name != "input":
            l = next(x for x in self.layers if x.name == name)
            if l.kind in ("relu", "maxpool"):
                name = l.inputs[0]
            elif l.kind == "concat":
                name = l.inputs[1]
            else:
                return name
        return name

    def bits(self, name: str) -> int:
        return self.act_bits[self.edge_of(name)]


def _fused(folded: ModelGraph) -> dict[str, bool]:
    out = {}
    for l in folded.layers:
        if l.kind in ("conv", "upconv", "output-conv"):
            cons = folded.consumers(l.name)
            out[l.name] = len(cons) == 1 and cons[0].kind == "relu"
    return out


def quantize_model(folded: ModelGraph, profile: dict[str, float], f_offset: int = 0) -> QModel:
    """Quantize a batch-norm-free model using a calibration profile.

    ``f_offset`` shifts every chosen fraction-bit count (used to study
    precision loss).
    """
    if folded.config.batchnorm:
        raise QuantizationError("fold batch norm before quantizing")
    fused = _fused(folded)

    def need(name):
        if name not in profile:
            raise QuantizationError(f"calibration profile has no entry for {name}")
        return profile[name]

    def clampf(f):
        return int(np.clip(f + f_offset, F_MIN, F_MAX))

    act_bits = {"input": clampf(choose_qparams(need("input")).fraction_bits)}
    for l in folded.layers:
        if l.name in fused:
            src = folded.consumers(l.name)[0].name if fused[l.name] else l.name
            act_bits[l.name] = clampf(choose_qparams(need(src)).fraction_bits)
    q = QModel(folded.config, list(folded.layers), {}, {}, {}, act_bits, fused)
    # both concat operands must share a scale: use the coarser one
    for l in folded.layers:
        if l.kind == "concat":
            a, b = q.edge_of(l.inputs[0]), q.edge_of(l.inputs[1])
            f = min(act_bits[a], act_bits[b])
            act_bits[a] = act_bits[b] = f
    for l in folded.layers:
        if l.name not in fused:
            continue
        w = folded.params[l.params[0]].astype(np.float64)
        per_out = np.abs(w).max(axis=(0, 2, 3) if l.kind == "upconv" else (1, 2, 3))
        fw = np.array([clampf(choose_qparams(float(m)).fraction_bits) for m in per_out], dtype=np.int64)
        shape = (1, -1, 1, 1) if l.kind == "upconv" else (-1, 1, 1, 1)
        q.weights[l.name] = np.clip(round_half_away(w * 2.0 ** fw.reshape(shape)), QMIN, QMAX).astype(np.int8)
        q.weight_bits[l.name] = fw
        f_in = q.bits(l.inputs[0])
        acc_b = round_half_away(folded.params[l.params[1]].astype(np.float64) * 2.0 ** (f_in + fw))
        if np.any(acc_b > INT32_MAX) or np.any(acc_b < INT32_MIN):
            log.warning("%s: bias saturates the int32 accumulator range", l.name)
        q.biases[l.name] = np.clip(acc_b, INT32_MIN, INT32_MAX).astype(np.int32)
    return q


def _int_layer(q: QModel, l, xq: np.ndarray, debug: bool) -> np.ndarray:
    w = q.weights[l.name].astype(np.float64)
    if l.kind == "upconv":
        acc = T.conv_transpose2d(xq.astype(np.float64), w, layer=l.name)
    else:
        acc = T.conv2d(xq.astype(np.float64), w, padding=1 if l.kind == "conv" else 0, layer=l.name)
    acc = acc.astype(np.int64) + q.biases[l.name].astype(np.int64)[None, :, None, None]
    if debug and (acc.max(initial=0) > INT32_MAX or acc.min(initial=0) < INT32_MIN):
        raise QuantizationError(f"{l.name}: int32 accumulator overflow")
    shift = q.bits(l.inputs[0]) + q.weight_bits[l.name] - q.act_bits[l.name]
    out = np.clip(rounding_shift(acc, shift[None, :, None, None]), QMIN, QMAX)
    if q.fused_relu.get(l.name):
        out = np.maximum(out, 0)
    return out.astype(np.int8)


def qforward(q: QModel, x, *, debug: bool = False, taps: dict | None = None):
    """Integer inference. Returns float logits and the argmax mask ``(n, h, w)``.

    ``x`` is either float input (quantized here with the input scale) or an
    int8 array already at that scale.
    """
    x = np.asarray(x)
    if x.dtype != np.int8:
        x = quantize(check_input(_shape_model(q), x), q.act_bits["input"])
    vals: dict[str, np.ndarray] = {"input": x}
    for l in q.layers:
        src = vals[l.inputs[0]]
        if l.kind in ("conv", "upconv", "output-conv"):
            y = _int_layer(q, l, src, debug)
        elif l.kind == "relu":
            y = np.maximum(src, 0).astype(np.int8)
        elif l.kind == "maxpool":
            y = T.maxpool2d(src)[0]
        elif l.kind == "concat":
            y = np.concatenate([src, vals[l.inputs[1]]], axis=1)
        else:
            raise QuantizationError(f"unexpected layer kind {l.kind} in a folded model")
        vals[l.name] = y
    if taps is not None:
        taps.update({k: dequantize(v, q.bits(k)) for k, v in vals.items()})
    head = q.layers[-1].name
    logits = dequantize(vals[head], q.act_bits[head]).astype(np.float32)
    return logits, logits.argmax(axis=1).astype(np.uint8)


def _shape_model(q: QModel) -> ModelGraph:
    return ModelGraph(q.config, q.layers, {})


def qpredict(q: QModel, x) -> np.ndarray:
    return qforward(q, x)[1]


def snr_db(ref, test) -> float:
    ref = np.asarray(ref, np.float64)
    noise = np.sum((ref - np.asarray(test, np.float64)) ** 2)
    signal = np.sum(ref ** 2)
    if noise == 0:
        return float("inf")
    if signal == 0:
        return float("-inf")
    return float(10 * np.log10(signal / noise))


def quant_error_report(folded: ModelGraph, q: QModel, images) -> dict:
    """Per-edge SNR, logit max-abs error and argmax disagreement rate."""
    x = np.stack([np.asarray(i, np.float32)[None] if np.ndim(i) == 2 else i for i in images])
    ftaps: dict = {}
    flogits = forward(folded, x, taps=ftaps)
    qtaps: dict = {}
    qlogits, qmask = qforward(q, x, taps=qtaps)
    snr = {}
    for name in ["input"] + [l.name for l in q.layers]:
        if name != "input" and q.edge_of(name) != name:
            continue
        ref_name = name
        if name in q.fused_relu and q.fused_relu[name]:
            ref_name = next(l.name for l in q.layers if l.inputs == (name,))
        snr[name] = snr_db(ftaps[ref_name], qtaps[ref_name])
    fmask = flogits.argmax(axis=1)
    return {
        "snr_db": snr,
        "logit_max_abs_error": float(np.max(np.abs(flogits.astype(np.float64) - qlogits))),
        "logit_mean_abs_error": float(np.mean(np.abs(flogits.astype(np.float64) - qlogits))),
        "mask_disagreement": float(np.mean(fmask != qmask)),
    }


# --- serialization ----------------------------------------------------------

def save_qmodel(q: QModel, path) -> None:
    header = {
        "format": "qmodel",
        "config": q.config.to_dict(),
        "qparams": {
            "act_bits": q.act_bits,
            "weight_bits": {k: [int(f) for f in v] for k, v in q.weight_bits.items()},
            "fused_relu": q.fused_relu,
        },
    }
    tensors = {}
    for k in sorted(q.weights):
        tensors[f"{k}.weight"] = q.weights[k]
        tensors[f"{k}.bias"] = q.biases[k]
    weightfile.write(path, header, tensors)


def load_qmodel(path) -> QModel:
    header, tensors = weightfile.read(path)
    if header.get("format") != "qmodel":
        raise weightfile.RecordMismatchError(
            f"{path}: expected a quantized model, found format {header.get('format')!r}")
    cfg = UNetConfig.from_dict(header["config"])
    shape = build(cfg, init=False)
    qp = header["qparams"]
    q = QModel(cfg, shape.layers, {}, {}, {}, {k: int(v) for k, v in qp["act_bits"].items()},
               {k: bool(v) for k, v in qp["fused_relu"].items()})
    for l in shape.conv_layers():
        try:
            w, b = tensors[f"{l.name}.weight"], tensors[f"{l.name}.bias"]
        except KeyError as e:
            raise weightfile.RecordMismatchError(f"{path}: missing tensor {e}") from None
        if w.dtype != np.int8 or b.dtype != np.int32:
            raise weightfile.RecordMismatchError(f"{path}: {l.name} must hold int8 weights and int32 biases")
        if w.shape != shape.params[l.params[0]].shape:
            raise weightfile.RecordMismatchError(f"{path}: {l.name}.weight has shape {w.shape}")
        q.weights[l.name], q.biases[l.name] = w, b
        q.weight_bits[l.name] = np.asarray(qp["weight_bits"][l.name], dtype=np.int64)
    return q


def load_any(path):
    """Load either a float model or a quantized model."""
    fmt = weightfile.file_format(path)
    if fmt == "qmodel":
        return load_qmodel(path)
    return weightfile.load_weights(path)
