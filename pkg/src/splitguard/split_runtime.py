"""Partitioned (head on device / tail on edge) inference of a small classifier.

The classifier is a :class:`~splitguard.nn_core.Sequential`; a cut at layer
index ``k`` gives the device layers ``[0, k)`` and the edge layers ``[k, end)``.
Both halves share the parent's parameter arrays, so split execution is
bitwise identical to monolithic execution on the same batch.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .datasets import ImageDataset
from .errors import (BadMagicError, ConfigurationError, LengthMismatchError, TrainingError,
                     TruncatedFrameError, UsageError, VersionMismatchError)
from .nn_core import (Adam, Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential,
                      batch_confidence, cross_entropy, softmax_confidence)

BENIGN = "benign"
ADVERSARIAL = "adversarial"

FRAME_MAGIC = b"SSFV"
FRAME_VERSION = 1
DTYPE_F32 = 1
_FRAME_HEADER = struct.Struct("<4sHBI")


@dataclass(frozen=True)
class ModelSpec:
    """Layer recipe plus labelled cut points (label -> layer index)."""

    name: str
    input_shape: tuple[int, ...]
    num_classes: int
    layers: tuple[tuple[str, dict], ...]
    cuts: tuple[tuple[str, int], ...]


def tiny_convnet_spec(num_classes: int = 10, in_channels: int = 3, image_size: int = 32) -> ModelSpec:
    """Three conv blocks and a linear classifier; cuts after each block."""
    s = image_size // 4
    layers = (
        ("conv2d", dict(in_channels=in_channels, out_channels=8, kernel_size=3, padding=1)),
        ("relu", {}),
        ("maxpool2d", dict(size=2)),
        ("conv2d", dict(in_channels=8, out_channels=16, kernel_size=3, padding=1)),
        ("relu", {}),
        ("maxpool2d", dict(size=2)),
        ("conv2d", dict(in_channels=16, out_channels=32, kernel_size=3, padding=1)),
        ("relu", {}),
        ("flatten", {}),
        ("dense", dict(in_features=32 * s * s, out_features=num_classes)),
    )
    return ModelSpec("tiny_convnet", (in_channels, image_size, image_size), num_classes,
                     layers, (("early", 3), ("mid", 6), ("deep", 8)))


MODEL_SPECS = {"tiny_convnet": tiny_convnet_spec}

_LAYER_FACTORIES = {"dense": Dense, "conv2d": Conv2D, "relu": ReLU,
                    "maxpool2d": MaxPool2D, "flatten": Flatten}


@dataclass(frozen=True)
class CutPoint:
    label: str
    layer_index: int
    shape: tuple[int, ...]  # activation shape at the cut (per sample)

    @property
    def d(self) -> int:
        return int(np.prod(self.shape))


class Model:
    def __init__(self, spec: ModelSpec, net: Sequential):
        self.spec = spec
        self.net = net

    def cut(self, label: str) -> CutPoint:
        for name, idx in self.spec.cuts:
            if name == label:
                return CutPoint(name, idx, self.net.shapes[idx])
        raise UsageError(f"unknown cut {label!r}; available: {[c for c, _ in self.spec.cuts]}")

    def cut_at(self, layer_index: int) -> CutPoint:
        if not 1 <= layer_index < len(self.net):
            raise UsageError(f"cut index {layer_index} outside [1, {len(self.net) - 1}]")
        label = dict((i, c) for c, i in self.spec.cuts).get(layer_index, f"layer{layer_index}")
        return CutPoint(label, layer_index, self.net.shapes[layer_index])

    @property
    def cut_points(self) -> list[CutPoint]:
        return [self.cut(c) for c, _ in self.spec.cuts]

    def forward(self, images: np.ndarray) -> np.ndarray:
        return self.net.forward(images)

    def predict(self, images: np.ndarray, batch_size: int = 256):
        logits = np.concatenate([self.forward(images[i:i + batch_size])
                                 for i in range(0, len(images), batch_size)])
        classes, conf = batch_confidence(logits)
        return logits, classes, conf


def validate_spec(spec: ModelSpec) -> Sequential:
    """Instantiate the layer stack, checking shapes and cut indices."""
    layers = []
    for i, (kind, hp) in enumerate(spec.layers):
        if kind not in _LAYER_FACTORIES:
            raise ConfigurationError(f"layer {i}: unknown kind {kind!r}")
        try:
            layers.append(_LAYER_FACTORIES[kind](**hp))
        except TypeError as exc:
            raise ConfigurationError(f"layer {i} ({kind}): {exc}") from None
    net = Sequential(layers, spec.input_shape)
    if net.output_shape != (spec.num_classes,):
        raise ConfigurationError(
            f"layer {len(layers) - 1}: network output {net.output_shape} != ({spec.num_classes},)")
    prev = 0
    for label, idx in spec.cuts:
        if not 1 <= idx <= len(layers) - 1:
            raise ConfigurationError(f"cut {label!r} at layer {idx} outside [1, {len(layers) - 1}]")
        if idx <= prev:
            raise ConfigurationError(f"cut {label!r} at layer {idx}: cut indices must strictly increase")
        prev = idx
    return net


def build_model(spec: ModelSpec, seed: int) -> Model:
    net = validate_spec(spec)
    net.init_params(np.random.default_rng(seed))
    return Model(spec, net)


# -- features -----------------------------------------------------------------

@dataclass
class FeatureVector:
    values: np.ndarray
    source_label: int | None = None
    provenance: str = BENIGN
    noisy: bool = False


@dataclass
class FeatureDataset:
    """Column-oriented batch of feature vectors taken at one cut.

    ``labels`` uses -1 for "no label"; iteration yields :class:`FeatureVector`.
    """

    cut: CutPoint
    values: np.ndarray
    labels: np.ndarray = None
    adversarial: np.ndarray = None
    noisy: np.ndarray = None
    split: str = "train"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.values)
        if self.values.ndim != 2 or (n and self.values.shape[1] != self.cut.d):
            raise UsageError(f"feature matrix {self.values.shape} does not match cut d={self.cut.d}")
        if self.labels is None:
            self.labels = np.full(n, -1, dtype=np.int64)
        if self.adversarial is None:
            self.adversarial = np.zeros(n, dtype=bool)
        if self.noisy is None:
            self.noisy = np.zeros(n, dtype=bool)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.adversarial = np.asarray(self.adversarial, dtype=bool)
        self.noisy = np.asarray(self.noisy, dtype=bool)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i) -> FeatureVector:
        label = int(self.labels[i])
        return FeatureVector(self.values[i], None if label < 0 else label,
                             ADVERSARIAL if self.adversarial[i] else BENIGN, bool(self.noisy[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "FeatureDataset":
        return FeatureDataset(self.cut, self.values[idx], self.labels[idx],
                              self.adversarial[idx], self.noisy[idx], self.split)

    def replace(self, **changes) -> "FeatureDataset":
        fields = dict(cut=self.cut, values=self.values, labels=self.labels,
                      adversarial=self.adversarial, noisy=self.noisy, split=self.split)
        fields.update(changes)
        return FeatureDataset(**fields)

    @classmethod
    def from_vectors(cls, cut: CutPoint, vectors, split: str = "train") -> "FeatureDataset":
        vectors = list(vectors)
        for v in vectors:
            if len(v.values) != cut.d:
                raise UsageError(f"feature of length {len(v.values)} at cut with d={cut.d}")
        values = np.array([v.values for v in vectors]).reshape(len(vectors), cut.d)
        return cls(cut, values,
                   [-1 if v.source_label is None else v.source_label for v in vectors],
                   [v.provenance == ADVERSARIAL for v in vectors],
                   [v.noisy for v in vectors], split)

    @classmethod
    def concat(cls, parts: list["FeatureDataset"], split: str | None = None) -> "FeatureDataset":
        cut = parts[0].cut
        if any(p.cut.d != cut.d for p in parts):
            raise UsageError("cannot concatenate features from different cuts")
        return cls(cut, np.concatenate([p.values for p in parts]),
                   np.concatenate([p.labels for p in parts]),
                   np.concatenate([p.adversarial for p in parts]),
                   np.concatenate([p.noisy for p in parts]),
                   split or parts[0].split)


class Head:
    """Device-side layers ``[0, cut)``."""

    def __init__(self, model: Model, cut: CutPoint):
        self.model = model
        self.cut = cut

    def __call__(self, images: np.ndarray) -> np.ndarray:
        out = self.model.net.forward(images, 0, self.cut.layer_index)
        return out.reshape(len(out), -1)

    def features(self, data: ImageDataset, split: str = "train", batch_size: int = 256) -> FeatureDataset:
        values = np.concatenate([self(data.images[i:i + batch_size])
                                 for i in range(0, len(data), batch_size)])
        return FeatureDataset(self.cut, values, data.labels.copy(), split=split)


class Tail:
    """Edge-side layers ``[cut, end)``; sees only feature values."""

    def __init__(self, model: Model, cut: CutPoint):
        self.model = model
        self.cut = cut

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.cut.d:
            raise UsageError(f"tail at cut {self.cut.label!r} expects d={self.cut.d}, got {values.shape[1:]}")
        x = values.reshape((len(values),) + self.cut.shape)
        return self.model.net.forward(x, self.cut.layer_index)

    def predict(self, values: np.ndarray, batch_size: int = 512):
        """``(logits, classes, confidences)`` for a feature matrix."""
        if len(values) == 0:
            return np.zeros((0, self.model.spec.num_classes)), np.zeros(0, int), np.zeros(0)
        logits = np.concatenate([self(values[i:i + batch_size])
                                 for i in range(0, len(values), batch_size)])
        classes, conf = batch_confidence(logits)
        return logits, classes, conf


def partition(model: Model, cut: CutPoint) -> tuple[Head, Tail]:
    if not 1 <= cut.layer_index < len(model.net):
        raise UsageError(f"invalid cut index {cut.layer_index} for a {len(model.net)}-layer model")
    if tuple(cut.shape) != model.net.shapes[cut.layer_index]:
        raise UsageError(f"cut shape {cut.shape} does not match the model at layer {cut.layer_index}")
    return Head(model, cut), Tail(model, cut)


def run_head(head: Head, image: np.ndarray) -> FeatureVector:
    image = np.asarray(image, dtype=np.float64)
    if image.shape != head.model.net.input_shape:
        raise UsageError(f"image shape {image.shape} != model input {head.model.net.input_shape}")
    return FeatureVector(head(image[None])[0])


def run_tail(tail: Tail, h: FeatureVector):
    if len(h.values) != tail.cut.d:
        raise UsageError(f"feature length {len(h.values)} != cut d={tail.cut.d}")
    logits = tail(np.asarray(h.values)[None])[0]
    cls, conf = softmax_confidence(logits)
    return logits, cls, conf


# -- wire format --------------------------------------------------------------

def serialize_features(h: FeatureVector) -> bytes:
    """``SSFV`` frame: magic, version u16, dtype u8 (1 = f32), d u32, f32 payload (little-endian)."""
    values = np.asarray(h.values, dtype="<f4")
    return _FRAME_HEADER.pack(FRAME_MAGIC, FRAME_VERSION, DTYPE_F32, len(values)) + values.tobytes()


def deserialize_features(frame: bytes) -> FeatureVector:
    if len(frame) < _FRAME_HEADER.size:
        if frame[:4] != FRAME_MAGIC[:len(frame[:4])]:
            raise BadMagicError(f"bad magic {bytes(frame[:4])!r}")
        raise TruncatedFrameError(f"truncated frame: {len(frame)} bytes, header needs {_FRAME_HEADER.size}")
    magic, version, dtype, d = _FRAME_HEADER.unpack_from(frame)
    if magic != FRAME_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != FRAME_VERSION:
        raise VersionMismatchError(f"frame version {version}, expected {FRAME_VERSION}")
    if dtype != DTYPE_F32:
        raise VersionMismatchError(f"unsupported dtype code {dtype}")
    payload = len(frame) - _FRAME_HEADER.size
    if payload < 4 * d:
        raise TruncatedFrameError(f"truncated frame: {payload} payload bytes for d={d}")
    if payload > 4 * d:
        raise LengthMismatchError(f"frame carries {payload} payload bytes but declares d={d}")
    values = np.frombuffer(frame, dtype="<f4", count=d, offset=_FRAME_HEADER.size)
    return FeatureVector(values.astype(np.float64))


# -- classifier training ------------------------------------------------------

@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def as_dict(self):
        return {"epochs": self.epochs}


def train_classifier(model: Model, train: ImageDataset, test: ImageDataset | None = None,
                     epochs: int = 6, batch_size: int = 64, lr: float = 2e-3, seed: int = 0) -> TrainLog:
    """Minibatch Adam on softmax cross-entropy; returns per-epoch loss/accuracy."""
    rng = np.random.default_rng(seed)
    opt = Adam(lr=lr)
    params = model.net.parameters()
    log = TrainLog()
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            acts = model.net.forward_trace(train.images[idx])
            loss, grad = cross_entropy(acts[-1], train.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"classifier loss diverged at epoch {epoch}")
            _, grads = model.net.backward(acts, grad)
            opt.step(params, grads)
            total += loss * len(idx)
            correct += int((acts[-1].argmax(axis=1) == train.labels[idx]).sum())
        row = {"epoch": epoch, "loss": total / len(train), "train_accuracy": correct / len(train)}
        if test is not None:
            row["test_accuracy"] = accuracy(model, test)
        log.epochs.append(row)
    return log


def accuracy(model: Model, data: ImageDataset) -> float:
    _, classes, _ = model.predict(data.images)
    return float(np.mean(classes == data.labels))
