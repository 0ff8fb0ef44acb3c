"""Compact two-layer CNN over 8-bit spectrogram images, written in numpy.

Architecture (all convs 3x3, stride 1, same padding)::

    conv(F1) -> relu -> maxpool 2x2 -> conv(F2) -> relu -> maxpool 2x2 -> dense

Training is plain minibatch SGD with decoupled L2 weight decay on kernels
only.  Everything runs in float64 so finite-difference checks stay tight.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import SpectrogramImage

MAGIC = b"HSM1"
FORMAT_VERSION = 1
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "dense_w", "dense_b")
WEIGHT_NAMES = ("conv1_w", "conv2_w", "dense_w")


class ModelError(ValueError):
    pass


class ModelFormatError(ModelError):
    pass


class ModelVersionError(ModelFormatError):
    pass


class ModelChecksumError(ModelFormatError):
    pass


class ModelTruncatedError(ModelFormatError):
    pass


@dataclass(frozen=True)
class Arch:
    input_h: int
    input_w: int
    n_classes: int
    conv1_filters: int = 8
    conv2_filters: int = 16

    def __post_init__(self):
        if self.input_h % 4 or self.input_w % 4 or self.input_h < 4 or self.input_w < 4:
            raise ModelError("input dimensions must be positive multiples of 4")
        if self.n_classes < 2:
            raise ModelError("need at least two classes")
        if self.conv1_filters < 1 or self.conv2_filters < 1:
            raise ModelError("filter counts must be positive")

    @property
    def dense_in(self) -> int:
        return (self.input_h // 4) * (self.input_w // 4) * self.conv2_filters

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        f1, f2 = self.conv1_filters, self.conv2_filters
        return {
            "conv1_w": (f1, 1, 3, 3),
            "conv1_b": (f1,),
            "conv2_w": (f2, f1, 3, 3),
            "conv2_b": (f2,),
            "dense_w": (self.n_classes, self.dense_in),
            "dense_b": (self.n_classes,),
        }


@dataclass
class ModelParams:
    arch: Arch
    label_names: list[str]
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.label_names) != self.arch.n_classes:
            raise ModelError("label_names length must equal n_classes")
        if len(set(self.label_names)) != len(self.label_names):
            raise ModelError("label names must be unique")
        shapes = self.arch.param_shapes()
        if set(self.params) != set(shapes):
            raise ModelError(f"expected parameters {sorted(shapes)}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ModelError(f"{name}: shape {self.params[name].shape}, expected {shape}")
            self.params[name] = np.asarray(self.params[name], dtype=np.float64)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, list(self.label_names),
                           {k: v.copy() for k, v in self.params.items()}, json.loads(json.dumps(self.meta)))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(self.params[name].astype(">f8").tobytes())
        return h.hexdigest()


def init_model(arch: Arch, label_names: Sequence[str], seed: int = 0) -> ModelParams:
    """Glorot-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
            continue
        if len(shape) == 4:
            fan_in, fan_out = shape[1] * 9, shape[0] * 9
        else:
            fan_in, fan_out = shape[1], shape[0]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, shape)
    return ModelParams(arch, list(label_names), params)


# --------------------------------------------------------------------------
# Layers


def _conv_cols(x: np.ndarray) -> np.ndarray:
    """im2col for a 3x3 same-padded conv: (B, H, W, C) -> (B*H*W, C*9)."""
    b, h, w, c = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))  # B,H,W,C,3,3
    return win.reshape(b * h * w, c * 9)


def conv_forward(x, weight, bias):
    """Channels-last conv; ``weight`` is (F, C, 3, 3)."""
    b, h, w, _ = x.shape
    cols = _conv_cols(x)
    out = cols @ weight.reshape(weight.shape[0], -1).T + bias
    return out.reshape(b, h, w, -1), cols


def conv_backward(dout, cols, x_shape, weight, need_dx=True):
    b, h, w, c = x_shape
    f = weight.shape[0]
    dflat = dout.reshape(-1, f)
    dw = (dflat.T @ cols).reshape(weight.shape)
    db = dflat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dflat @ weight.reshape(f, -1)).reshape(b, h, w, c, 3, 3)
    dpad = np.zeros((b, h + 2, w + 2, c))
    for i in range(3):
        for j in range(3):
            dpad[:, i : i + h, j : j + w, :] += dcols[..., i, j]
    return dpad[:, 1:-1, 1:-1, :], dw, db


def _quads(x):
    return x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]


def pool_forward(x):
    """2x2 max pool over (B, H, W, C)."""
    a, b, c, d = _quads(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def pool_backward(dout, x, out):
    """Route each gradient to the window's argmax.

    Window elements are scanned row-major and ties go to the first one, so
    routing is deterministic even on flat (e.g. all-zero) windows.
    """
    dx = np.zeros(x.shape)
    taken = np.zeros(out.shape, dtype=bool)
    for view, quad in zip(_quads(dx), _quads(x)):
        hit = (quad == out) & ~taken
        view[...] = np.where(hit, dout, 0.0)
        taken |= hit
    return dx


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# Network


def as_batch(images, arch: Arch) -> np.ndarray:
    """Stack images (SpectrogramImage or 2-D arrays) into (B, H, W, 1) floats in [0, 1]."""
    arrays = []
    for img in images:
        if isinstance(img, SpectrogramImage):
            arr = img.pixels.astype(np.float64) / 255.0
        else:
            arr = np.asarray(img, dtype=np.float64)
        if arr.shape != (arch.input_h, arch.input_w):
            raise ModelError(f"image shape {arr.shape} does not match model input "
                             f"{(arch.input_h, arch.input_w)}")
        arrays.append(arr)
    return np.stack(arrays)[..., None]


def _forward(model: ModelParams, x: np.ndarray):
    p = model.params
    z1, cols1 = conv_forward(x, p["conv1_w"], p["conv1_b"])
    a1 = np.maximum(z1, 0.0)
    h1 = pool_forward(a1)
    z2, cols2 = conv_forward(h1, p["conv2_w"], p["conv2_b"])
    a2 = np.maximum(z2, 0.0)
    h2 = pool_forward(a2)
    flat = h2.reshape(len(x), -1)
    logits = flat @ p["dense_w"].T + p["dense_b"]
    cache = (x, a1, cols1, h1, a2, cols2, h2, flat)
    return logits, cache


def forward_batch(model: ModelParams, x: np.ndarray) -> np.ndarray:
    return _forward(model, x)[0]


def forward(model: ModelParams, image) -> np.ndarray:
    """Logits for a single image."""
    return forward_batch(model, as_batch([image], model.arch))[0]


def loss_and_grad(model: ModelParams, batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over ``batch`` of (image, label_index) and its exact gradient."""
    if not batch:
        raise ModelError("empty batch")
    images, labels = zip(*batch)
    return loss_and_grad_arrays(model, as_batch(images, model.arch), np.asarray(labels))


def loss_and_grad_arrays(model: ModelParams, x: np.ndarray, labels: np.ndarray):
    n = model.arch.n_classes
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= n:
        raise ModelError(f"label index out of range for {n} classes")
    logits, (x, a1, cols1, h1, a2, cols2, h2, flat) = _forward(model, x)
    bsz = len(labels)
    probs = softmax(logits)
    # log-softmax directly avoids log(0) for confident wrong predictions
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted[np.arange(bsz), labels] - np.log(np.exp(shifted).sum(axis=1))
    loss = float(-log_p.mean())

    p = model.params
    dlogits = probs.copy()
    dlogits[np.arange(bsz), labels] -= 1.0
    dlogits /= bsz
    grads = {"dense_w": dlogits.T @ flat, "dense_b": dlogits.sum(axis=0)}
    dh2 = (dlogits @ p["dense_w"]).reshape(h2.shape)
    da2 = pool_backward(dh2, a2, h2)
    dz2 = da2 * (a2 > 0)
    dh1, grads["conv2_w"], grads["conv2_b"] = conv_backward(dz2, cols2, h1.shape, p["conv2_w"])
    da1 = pool_backward(dh1, a1, h1)
    dz1 = da1 * (a1 > 0)
    _, grads["conv1_w"], grads["conv1_b"] = conv_backward(dz1, cols1, x.shape, p["conv1_w"], need_dx=False)
    return loss, grads


# --------------------------------------------------------------------------
# Optimisation


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    training_steps: int = 8000
    weight_decay: float = 0.05
    batch_size: int = 16
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ModelError("learning_rate must be positive")
        if self.training_steps < 1:
            raise ModelError("training_steps must be at least 1")
        if self.weight_decay < 0:
            raise ModelError("weight_decay must be non-negative")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ModelError("batch_size and eval_every must be positive")


def sgd_step(model: ModelParams, grads: dict[str, np.ndarray], config: TrainConfig) -> ModelParams:
    """``w <- w - lr * (g + decay * w)``; biases are not decayed.  Updates in place."""
    lr, decay = config.learning_rate, config.weight_decay
    for name in PARAM_NAMES:
        w = model.params[name]
        g = grads[name]
        if g.shape != w.shape:
            raise ModelError(f"{name}: gradient shape {g.shape} != weight shape {w.shape}")
        if name in WEIGHT_NAMES and decay:
            w -= lr * (g + decay * w)
        else:
            w -= lr * g
    return model


@dataclass
class Prediction:
    entries: list[tuple[str, float]]

    @property
    def label(self) -> str:
        return self.entries[0][0]

    @property
    def score(self) -> float:
        return self.entries[0][1]

    def as_dict(self) -> dict:
        return {"label": self.label, "scores": dict(self.entries)}


def prediction_from_logits(logits, label_names: Sequence[str]) -> Prediction:
    probs = softmax(logits)
    # stable sort on -score keeps lower class indices first on ties
    order = np.argsort(-probs, kind="stable")
    return Prediction([(label_names[i], float(probs[i])) for i in order])


def predict(model: ModelParams, image) -> Prediction:
    return prediction_from_logits(forward(model, image), model.label_names)


def predict_batch(model: ModelParams, images, chunk: int = 64) -> list[Prediction]:
    out = []
    images = list(images)
    for start in range(0, len(images), chunk):
        logits = forward_batch(model, as_batch(images[start : start + chunk], model.arch))
        out.extend(prediction_from_logits(row, model.label_names) for row in logits)
    return out


def accuracy(model: ModelParams, data) -> float:
    if not data:
        return float("nan")
    images, labels = zip(*data)
    preds = predict_batch(model, images)
    index = {name: i for i, name in enumerate(model.label_names)}
    return sum(index[p.label] == y for p, y in zip(preds, labels)) / len(labels)


@dataclass
class HistoryRow:
    step: int
    train_loss: float
    val_accuracy: float


def train(
    train_data,
    val_data,
    label_names: Sequence[str],
    config: TrainConfig = TrainConfig(),
    conv1_filters: int = 8,
    conv2_filters: int = 16,
    log=None,
) -> tuple[ModelParams, list[HistoryRow]]:
    """Train from scratch and return the best-validation snapshot.

    ``train_data`` / ``val_data`` are sequences of ``(image, label_index)``.
    Validation accuracy is measured every ``config.eval_every`` steps and at
    the last step; among checkpoints tied on the highest accuracy the latest
    (best trained) one wins.
    Without validation data the final weights are returned.
    """
    train_data = list(train_data)
    if not train_data:
        raise ModelError("empty training set")
    labels = np.asarray([y for _, y in train_data], dtype=np.int64)
    if len(np.unique(labels)) < 2:
        raise ModelError("training set must contain at least two classes")
    first = train_data[0][0]
    h, w = first.shape if isinstance(first, SpectrogramImage) else np.asarray(first).shape
    arch = Arch(h, w, len(label_names), conv1_filters, conv2_filters)
    x_all = as_batch([img for img, _ in train_data], arch)

    model = init_model(arch, label_names, config.seed)
    rng = np.random.default_rng(config.seed + 1)
    order = rng.permutation(len(train_data))
    cursor = 0
    best, best_acc = model.copy(), -1.0
    history: list[HistoryRow] = []

    for step in range(1, config.training_steps + 1):
        idx = []
        while len(idx) < min(config.batch_size, len(train_data)):
            if cursor == len(order):
                order, cursor = rng.permutation(len(train_data)), 0
            take = min(config.batch_size - len(idx), len(order) - cursor)
            idx.extend(order[cursor : cursor + take])
            cursor += take
        idx = np.asarray(idx)
        loss, grads = loss_and_grad_arrays(model, x_all[idx], labels[idx])
        sgd_step(model, grads, config)
        if step % config.eval_every == 0 or step == config.training_steps:
            val_acc = accuracy(model, val_data) if val_data else float("nan")
            history.append(HistoryRow(step, loss, val_acc))
            if log:
                log(f"step {step:5d}  loss {loss:.4f}  val_acc {val_acc:.4f}")
            if val_data and val_acc >= best_acc:
                best, best_acc = model.copy(), val_acc
    if not val_data:
        best = model
    return best, history


def write_history_csv(history: Sequence[HistoryRow], path) -> None:
    lines = ["step,train_loss,val_accuracy"]
    lines += [f"{r.step},{r.train_loss!r},{r.val_accuracy!r}" for r in history]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Serialization
#
# MAGIC | u32 descriptor length | descriptor (UTF-8 JSON) | tensors (>f8, PARAM_NAMES order) | u32 CRC32
# The CRC covers everything between MAGIC and the CRC itself.


def model_to_bytes(model: ModelParams) -> bytes:
    arch = model.arch
    descriptor = {
        "format_version": FORMAT_VERSION,
        "arch": {
            "input_h": arch.input_h,
            "input_w": arch.input_w,
            "n_classes": arch.n_classes,
            "conv1_filters": arch.conv1_filters,
            "conv2_filters": arch.conv2_filters,
            "layers": "conv3x3-relu-maxpool2-conv3x3-relu-maxpool2-dense",
        },
        "label_names": list(model.label_names),
        "tensors": [[name, list(arch.param_shapes()[name])] for name in PARAM_NAMES],
        "meta": model.meta,
    }
    desc = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    body = struct.pack(">I", len(desc)) + desc
    body += b"".join(model.params[name].astype(">f8").tobytes() for name in PARAM_NAMES)
    return MAGIC + body + struct.pack(">I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> ModelParams:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    if len(data) < 8:
        raise ModelTruncatedError("model file truncated in header")
    (desc_len,) = struct.unpack_from(">I", data, 4)
    if len(data) < 8 + desc_len:
        raise ModelTruncatedError("model file truncated in descriptor")
    try:
        descriptor = json.loads(data[8 : 8 + desc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelChecksumError("model descriptor is corrupt") from exc
    version = descriptor.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelVersionError(f"unsupported model format version {version!r}")
    a = descriptor["arch"]
    arch = Arch(a["input_h"], a["input_w"], a["n_classes"], a["conv1_filters"], a["conv2_filters"])
    shapes = arch.param_shapes()
    n_values = sum(int(np.prod(s)) for s in shapes.values())
    end = 8 + desc_len + 8 * n_values
    if len(data) < end + 4:
        raise ModelTruncatedError("model file truncated in tensor payload")
    (crc,) = struct.unpack_from(">I", data, end)
    if zlib.crc32(data[4:end]) != crc:
        raise ModelChecksumError("model payload checksum mismatch")
    params, pos = {}, 8 + desc_len
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        params[name] = np.frombuffer(data, dtype=">f8", count=count, offset=pos).astype(np.float64).reshape(shapes[name])
        pos += 8 * count
    return ModelParams(arch, descriptor["label_names"], params, descriptor.get("meta", {}))


def save_model(model: ModelParams, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model))
    return path


def load_model(path: str | os.PathLike) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())
