"""Residual squeeze-and-excitation speaker classifier.

The network is a strided residual CNN over (freq, time) spectrogram
features: a 3x3 stem, four residual blocks with taps S1..S4 at their
outputs, temporal statistics pooling, an embedding layer, and a classifier
head (scaled-cosine for the additive-margin loss, plain affine otherwise).
Channel width doubles and both spatial axes halve (ceil) at each strided
block, so tap shapes follow directly from the config.

The model also owns the corpus feature normalization (scalar mean/std set
during training); :meth:`Model.featurize` maps raw energies to the
normalized features every downstream consumer works in.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine
from .engine import (Conv2D, CosineClassifier, Dense, Flatten, Network,
                     ReLU, ResidualUnit, ShapeMismatchError,
                     TemporalStatsPool)

TAP_NAMES = ("S1", "S2", "S3", "S4")

CHECKPOINT_MAGIC = b"CAMK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint bytes were rejected; the message states why."""


@dataclass
class ModelConfig:
    input_freq_bins: int
    input_frames: int
    base_channels: int
    block_counts: list[int]
    strides: list[int]
    embedding_dim: int
    num_classes: int
    loss_kind: str = "am-softmax"        # am-softmax | softmax
    margin_m: float = 0.2
    scale_s: float = 30.0
    seed: int = 0

    def validate(self) -> None:
        dims = (self.input_freq_bins, self.input_frames,
                self.base_channels, self.embedding_dim, self.num_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all dimensions must be positive, got {dims}")
        if len(self.block_counts) != 4 or len(self.strides) != 4:
            raise ValueError("block_counts and strides must have length 4")
        if any(n <= 0 for n in self.block_counts):
            raise ValueError(f"block counts must be positive: {self.block_counts}")
        if any(s not in (1, 2) for s in self.strides):
            raise ValueError(f"strides must be 1 or 2: {self.strides}")
        if self.loss_kind not in ("am-softmax", "softmax"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        f, t = self.input_freq_bins, self.input_frames
        for s in self.strides:
            f, t = -(-f // s), -(-t // s)
        if f < 1 or t < 1:
            raise ValueError("spatial axes collapse to zero under the "
                             f"configured strides: {self.strides}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def full_scale_config(seed: int = 0) -> ModelConfig:
    """Production-scale topology (shape assertions only, never trained here)."""
    return ModelConfig(input_freq_bins=80, input_frames=200, base_channels=32,
                       block_counts=[3, 4, 6, 3], strides=[1, 2, 2, 2],
                       embedding_dim=256, num_classes=5994, seed=seed)


def desk_config(num_classes: int = 32, seed: int = 7) -> ModelConfig:
    """Small configuration used for every trained experiment."""
    return ModelConfig(input_freq_bins=40, input_frames=100, base_channels=8,
                       block_counts=[1, 1, 1, 1], strides=[1, 2, 2, 2],
                       embedding_dim=64, num_classes=num_classes, seed=seed)


def tap_shapes(config: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """Nominal (freq, time, channels) at each tap for the configured input."""
    f, t = config.input_freq_bins, config.input_frames
    shapes = {}
    for i, name in enumerate(TAP_NAMES):
        s = config.strides[i]
        f, t = -(-f // s), -(-t // s)
        shapes[name] = (f, t, config.base_channels * 2 ** i)
    return shapes


def flatten_dim(config: ModelConfig) -> int:
    """Length of the pooled feature vector entering the embedding layer."""
    f4, _, c4 = tap_shapes(config)["S4"]
    return f4 * 2 * c4


class Model(Network):
    """Trained state: network stages, config, and feature normalization."""

    def __init__(self, stages, taps, config: ModelConfig):
        super().__init__(stages, taps)
        self.config = config
        self.expected_freq_bins = config.input_freq_bins
        self.input_mean = 0.0
        self.input_std = 1.0

    def featurize(self, values: np.ndarray) -> np.ndarray:
        """Map raw non-negative energies to normalized model features."""
        v = np.asarray(values, dtype=np.float64)
        return (v - self.input_mean) / self.input_std


def build_model(config: ModelConfig) -> Model:
    """Deterministically-initialized model with taps S1..S4 registered."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    stages: list[tuple[str, object]] = []
    taps: dict[str, int] = {}

    stages.append(("stem", Conv2D(3, 3, 1, config.base_channels, rng=rng)))
    stages.append(("stem_relu", ReLU()))
    c_in = config.base_channels
    for b in range(4):
        c_out = config.base_channels * 2 ** b
        for u in range(config.block_counts[b]):
            stride = config.strides[b] if u == 0 else 1
            unit = ResidualUnit(c_in, c_out, stride, rng=rng)
            stages.append((f"block{b + 1}_unit{u + 1}", unit))
            c_in = c_out
        taps[TAP_NAMES[b]] = len(stages) - 1

    stages.append(("pool", TemporalStatsPool()))
    stages.append(("flatten", Flatten()))
    stages.append(("embed", Dense(flatten_dim(config),
                                  config.embedding_dim, rng=rng)))
    if config.loss_kind == "am-softmax":
        head = CosineClassifier(config.embedding_dim, config.num_classes,
                                scale=config.scale_s, rng=rng)
    else:
        head = Dense(config.embedding_dim, config.num_classes, rng=rng)
    stages.append(("classifier", head))
    return Model(stages, taps, config)


def _values_of(spec) -> np.ndarray:
    return np.asarray(getattr(spec, "values", spec), dtype=np.float64)


def predict_top1(model: Model, spec) -> tuple[int, float]:
    """Top speaker and its posterior for one raw spectrogram.

    Accepts a Spectrogram or a bare (freq, time) array of raw energies;
    ties resolve toward the lower class index.
    """
    values = _values_of(spec)
    if values.ndim != 2 or values.shape[0] != model.config.input_freq_bins:
        raise ShapeMismatchError(
            f"expected ({model.config.input_freq_bins}, frames) input, "
            f"got shape {values.shape}")
    posts = engine.predict_batch(model, model.featurize(values)[None])[0]
    top = int(np.argmax(posts))
    return top, float(posts[top])


def predict_features_batch(model: Model, features: np.ndarray) -> np.ndarray:
    """Posteriors for a batch of already-normalized feature grids."""
    return engine.predict_batch(model, features)


# ---------------------------------------------------------------------------
# Checkpoint format: little-endian binary with a trailing CRC32.
#
#   magic   4s  = CAMK
#   version u32
#   cfglen  u32, config JSON (sorted keys)
#   input_mean f64, input_std f64
#   nparams u32
#   per parameter: u16 name length, name utf-8, u8 ndim, u32 dims..., f64 data
#   crc32   u32 over every preceding byte


def save_checkpoint(model: Model) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(struct.pack("<dd", model.input_mean, model.input_std))
    items = model.param_items()
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def load_checkpoint(data: bytes) -> Model:
    if len(data) < 16:
        raise CheckpointError("truncated checkpoint: shorter than any header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, not a checkpoint")
    version = struct.unpack_from("<I", data, 4)[0]
    if version > CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is newer than the "
            f"supported version {CHECKPOINT_VERSION}")
    stored = struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(data[:-4]) != stored:
        raise CheckpointError("checksum mismatch: checkpoint bytes corrupted")

    off = 8
    try:
        (cfglen,) = struct.unpack_from("<I", data, off)
        off += 4
        config = ModelConfig.from_dict(json.loads(data[off:off + cfglen]))
        off += cfglen
        mean, std = struct.unpack_from("<dd", data, off)
        off += 16
        (nparams,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(nparams):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=count,
                                offset=off).reshape(shape)
            off += 8 * count
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"truncated or malformed checkpoint: {exc}") from exc

    model = build_model(config)
    live = dict(model.param_items())
    if set(live) != set(params):
        raise CheckpointError("parameter names do not match the config topology")
    for name, arr in params.items():
        if live[name].shape != arr.shape:
            raise CheckpointError(
                f"parameter {name!r} shape {arr.shape} does not match "
                f"topology shape {live[name].shape}")
        live[name][...] = arr
    model.input_mean = mean
    model.input_std = std
    return model
