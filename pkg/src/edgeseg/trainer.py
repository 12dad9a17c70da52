"""Hand-written backward pass, Adam, and the training loop."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .metrics import confusion, f1
from .unet import ModelGraph, forward, predict_mask


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 350
    batch_size: int = 5
    split_fraction: float = 0.8
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not 0 < self.split_fraction < 1:
            raise ValueError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


# --- loss -------------------------------------------------------------------

def cross_entropy_loss(logits: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel cross entropy and its gradient w.r.t. ``logits``.

    ``target`` holds class indices (0/1) with shape ``(n, h, w)`` or
    ``(n, 1, h, w)``.
    """
    logits = T.check4d(logits, "logits")
    t = np.asarray(target)
    if t.ndim == 4:
        t = t[:, 0]
    n, c, h, w = logits.shape
    if t.shape != (n, h, w):
        raise T.ShapeError(f"target shape {t.shape} does not match logits {logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("target mask must be binary")
    t = t.astype(np.int64)
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    count = n * h * w
    loss = float(-picked.sum() / count)
    grad = np.exp(logp)
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1.0, axis=1)
    return loss, (grad / count).astype(logits.dtype)


# --- adjoints ---------------------------------------------------------------

def conv2d_backward(dout, x, w, padding: int):
    """Gradients of a stride-1 convolution w.r.t. input, weight and bias."""
    oc, ic, kh, kw = w.shape
    n, _, oh, ow = dout.shape
    g = dout.transpose(0, 2, 3, 1).reshape(-1, oc).astype(np.float64)
    cols = T.im2col(x, (kh, kw), 1, padding)
    dw = (g.T @ cols).reshape(w.shape)
    db = g.sum(axis=0)
    dcols = (g @ w.reshape(oc, -1).astype(np.float64)).reshape(n, oh, ow, ic, kh, kw)
    h, wd = x.shape[2], x.shape[3]
    dxp = np.zeros((n, ic, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return dx.astype(x.dtype), dw.astype(w.dtype), db.astype(w.dtype)


def conv_transpose2d_backward(dout, x, w):
    ic, oc = w.shape[:2]
    n, _, h, wd = x.shape
    g = dout.reshape(n, oc, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, oc * 4).astype(np.float64)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, ic).astype(np.float64)
    wm = w.reshape(ic, oc * 4).astype(np.float64)
    dw = (xm.T @ g).reshape(w.shape)
    db = g.reshape(-1, oc, 4).sum(axis=(0, 2))
    dx = (g @ wm.T).reshape(n, h, wd, ic).transpose(0, 3, 1, 2)
    return dx.astype(x.dtype), dw.astype(w.dtype), db.astype(w.dtype)


def batchnorm_train_backward(dout, xhat, inv_std, gamma):
    d = dout.astype(np.float64)
    dgamma = (d * xhat).sum(axis=(0, 2, 3))
    dbeta = d.sum(axis=(0, 2, 3))
    count = d.shape[0] * d.shape[2] * d.shape[3]
    dxhat = d * np.asarray(gamma, np.float64)[None, :, None, None]
    dx = (inv_std[None, :, None, None] / count) * (
        count * dxhat
        - dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    )
    return dx.astype(dout.dtype), dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)


def maxpool_backward(dout, idx, in_shape):
    n, c, h, w = in_shape
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    np.put_along_axis(dx, idx.reshape(n, c, -1), dout.reshape(n, c, -1), axis=2)
    return dx.reshape(in_shape)


def backward(model: ModelGraph, cache: dict, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable parameter, given a training-mode forward cache."""
    if "_act" not in cache:
        raise RuntimeError("backward needs the cache filled by forward(..., training=True, cache=...)")
    act = cache["_act"]
    p = model.params
    grads = {k: np.zeros_like(p[k]) for k in model.trainable()}
    dact: dict[str, np.ndarray] = {model.layers[-1].name: dlogits}

    def push(name, g):
        if name == "input":
            return
        if name in dact:
            dact[name] = dact[name] + g
        else:
            dact[name] = g

    for l in reversed(model.layers):
        d = dact.pop(l.name, None)
        if d is None:
            continue
        x = act[l.inputs[0]]
        if l.kind in ("conv", "output-conv"):
            dx, dw, db = conv2d_backward(d, x, p[l.params[0]], 1 if l.kind == "conv" else 0)
            grads[l.params[0]] += dw
            grads[l.params[1]] += db
            push(l.inputs[0], dx)
        elif l.kind == "bn":
            if l.name not in cache:
                raise RuntimeError(f"{l.name}: no batch statistics cached (forward was not in training mode)")
            xhat, inv_std = cache[l.name]
            dx, dg, dbeta = batchnorm_train_backward(d, xhat, inv_std, p[l.params[0]])
            grads[l.params[0]] += dg
            grads[l.params[1]] += dbeta
            push(l.inputs[0], dx)
        elif l.kind == "relu":
            push(l.inputs[0], d * (x > 0))
        elif l.kind == "maxpool":
            push(l.inputs[0], maxpool_backward(d, cache[l.name], x.shape))
        elif l.kind == "upconv":
            dx, dw, db = conv_transpose2d_backward(d, x, p[l.params[0]])
            grads[l.params[0]] += dw
            grads[l.params[1]] += db
            push(l.inputs[0], dx)
        elif l.kind == "concat":
            ca = x.shape[1]
            push(l.inputs[0], d[:, :ca])
            push(l.inputs[1], d[:, ca:])
    return grads


def loss_and_grads(model: ModelGraph, x, target, update_stats: bool = False):
    cache: dict = {}
    logits = forward(model, x, training=True, update_stats=update_stats, cache=cache)
    loss, dlogits = cross_entropy_loss(logits, target)
    return loss, backward(model, cache, dlogits)


# --- optimizer --------------------------------------------------------------

def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """Bias-corrected Adam update, applied in place to ``params``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise T.ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {p.shape}")
        g = g.astype(np.float64)
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros(p.shape)
            state.v[k] = np.zeros(p.shape)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


# --- training loop ----------------------------------------------------------

def _stack(samples):
    x = np.stack([s.image for s in samples])[:, None].astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.int64)
    return x, y


def mean_f1(model: ModelGraph, samples, batch_size: int = 8) -> float:
    scores = []
    for s in range(0, len(samples), batch_size):
        chunk = samples[s:s + batch_size]
        x, _ = _stack(chunk)
        for pred, smp in zip(predict_mask(model, x), chunk):
            scores.append(f1(confusion(pred, smp.mask)))
    return float(np.mean(scores))


def split_train_val(samples: list, fraction: float, seed: int):
    order = np.random.default_rng([seed, 1]).permutation(len(samples))
    n_train = min(max(int(round(fraction * len(samples))), 1), len(samples) - 1)
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


def fit(model: ModelGraph, dataset: Iterable, config: TrainConfig,
        progress: Callable[[dict], None] | None = None, val: Iterable | None = None,
        checkpoint: str | None = None, timing: bool = True) -> list[dict]:
    """Train ``model`` in place and return one log record per epoch.

    Without ``val`` the dataset is split by ``config.split_fraction``. The
    parameters with the best validation F1 are restored at the end, and
    written to ``checkpoint`` whenever they improve.
    """
    samples = list(dataset)
    if not samples:
        raise ValueError("cannot train on an empty dataset")
    if val is None:
        if len(samples) < 2:
            raise ValueError("need at least 2 samples to hold out a validation split")
        train, val = split_train_val(samples, config.split_fraction, config.seed)
    else:
        train, val = samples, list(val)
    log: list[dict] = []
    if config.epochs == 0:
        return log

    rng = np.random.default_rng(config.seed)
    state = AdamState()
    best_f1, best_params = -1.0, None
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        total, batches = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            x, y = _stack([train[i] for i in order[s:s + config.batch_size]])
            loss, grads = loss_and_grads(model, x, y, update_stats=True)
            adam_step(model.params, grads, state, config.learning_rate, config.betas, config.eps)
            total += loss
            batches += 1
        val_f1 = mean_f1(model, val) if val else float("nan")
        rec = {"epoch": epoch, "train_loss": total / batches, "val_f1": val_f1}
        if timing:
            rec["wall_ms"] = round((time.perf_counter() - t0) * 1000, 1)
        log.append(rec)
        if progress is not None:
            progress(rec)
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_params = {k: v.copy() for k, v in model.params.items()}
            if checkpoint is not None:
                from .weightfile import save_weights
                save_weights(model, checkpoint)
    if best_params is not None:
        model.params = best_params
    return log


def jsonl_sink(path):
    f = open(path, "w")

    def sink(rec: dict) -> None:
        f.write(json.dumps(rec) + "\n")
        f.flush()

    sink.close = f.close
    return sink


# --- gradient check ---------------------------------------------------------

def sample_coordinates(model: ModelGraph, count: int = 200, seed: int = 0) -> list[tuple[str, int]]:
    """At least one coordinate from every trainable tensor, the rest uniform."""
    rng = np.random.default_rng(seed)
    names = model.trainable()
    coords = [(k, int(rng.integers(model.params[k].size))) for k in names]
    sizes = np.array([model.params[k].size for k in names], dtype=np.float64)
    while len(coords) < count:
        k = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        coords.append((k, int(rng.integers(model.params[k].size))))
    return coords


def _kink_pattern(model: ModelGraph, cache: dict) -> list[np.ndarray]:
    act = cache["_act"]
    pattern = []
    for l in model.layers:
        if l.kind == "relu":
            pattern.append(act[l.inputs[0]] > 0)
        elif l.kind == "maxpool":
            pattern.append(cache[l.name])
    return pattern


def gradient_check(model: ModelGraph, x, target, epsilon: float = 1e-3,
                   sample: Callable[[ModelGraph], list] | list | None = None,
                   min_epsilon: float = 1e-8) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a copy of ``model``; batch norm uses batch statistics
    and running statistics are left untouched. A step that flips any ReLU
    sign or max-pool winner relative to the unperturbed point straddles a
    kink of the loss, so it is shrunk tenfold until both probes stay on the
    base point's smooth piece (or ``min_epsilon`` is reached).
    """
    m = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    _, grads = loss_and_grads(m, x, target)
    if sample is None:
        coords = sample_coordinates(m)
    elif callable(sample):
        coords = sample(m)
    else:
        coords = list(sample)

    def probe():
        cache: dict = {}
        logits = forward(m, x, training=True, cache=cache)
        return cross_entropy_loss(logits, target)[0], _kink_pattern(m, cache)

    _, base = probe()

    def same(pattern):
        return all(np.array_equal(a, b) for a, b in zip(pattern, base))

    worst = 0.0
    for name, idx in coords:
        flat = m.params[name].reshape(-1)
        orig = flat[idx]
        eps = epsilon
        while True:
            flat[idx] = orig + eps
            lp, pp = probe()
            flat[idx] = orig - eps
            lm, pm = probe()
            flat[idx] = orig
            if (same(pp) and same(pm)) or eps / 10 < min_epsilon:
                break
            eps /= 10
        cd = (lp - lm) / (2 * eps)
        a = float(grads[name].reshape(-1)[idx])
        err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
        worst = max(worst, err)
    return worst


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d
