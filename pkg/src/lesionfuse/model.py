"""Dual-encoder multimodal network with a shared-encoder SR decoder.

Layout::

    image ──► encoder (conv3x3/s2 + ReLU)* ──► feature map ──► SR decoder ──► sr_pred
                                   │
                                   └─► 1x1 conv + ReLU + global pool ──► fv_image ─┐
    metadata ──► 4-layer MLP ─────────────────────────────────────────► fv_meta ──┤
                                                                    fuse (⊙ | concat)
                                                                              │
                                                      linear + ReLU + linear ◄┘──► logits
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (Tensor, adaptive_avg_pool, concat, conv2d, elementwise_mul, flatten,
                     get_dtype, linear, mul, nearest_upsample, relu, sigmoid, sub)

DECODER_LAYERS = 6
FUSION_MODES = ("multiply", "concat")


@dataclass
class ModelConfig:
    input_size: int = 64
    encoder_channels: List[int] = field(default_factory=lambda: [16, 32, 64])
    fusion_dim: int = 512
    meta_dims: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    meta_input_dim: int = 0
    classifier_hidden: int = 256
    n_classes: int = 6
    sr_factor: int = 2
    fusion_mode: str = "multiply"
    image_only: bool = False
    decoder_channels: Optional[List[int]] = None
    # uniform bound is init_gain * sqrt(1 / fan_in); sqrt(6) keeps activation scale through ReLUs
    init_gain: float = math.sqrt(6.0)
    seed: int = 0

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        # five stride-2 stages: 224 -> 7, matching the 7x7 maps of ImageNet backbones
        base = dict(input_size=224, encoder_channels=[16, 32, 64, 128, 256])
        base.update(overrides)
        return cls(**base)

    @property
    def feature_extent(self) -> int:
        return self.input_size // 2 ** len(self.encoder_channels)

    @property
    def upsample_stages(self) -> int:
        ratio = self.sr_factor * self.input_size / self.feature_extent
        return int(round(math.log2(ratio)))

    def resolved_decoder_channels(self) -> List[int]:
        if self.decoder_channels is not None:
            return list(self.decoder_channels)
        top = self.encoder_channels[-1]
        return [max(8, top >> (i + 1)) for i in range(DECODER_LAYERS - 1)] + [3]

    def validate(self) -> "ModelConfig":
        if self.input_size < 1 or not self.encoder_channels:
            raise ConfigError("input_size and encoder_channels must be non-empty/positive")
        if self.input_size % 2 ** len(self.encoder_channels):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2^{len(self.encoder_channels)}"
                " (encoder downsamples by 2 per stage)")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}")
        if len(self.meta_dims) < 1:
            raise ConfigError("meta_dims must be non-empty")
        if self.fusion_mode == "multiply" and self.meta_dims[-1] != self.fusion_dim:
            raise ConfigError(
                f"multiply fusion needs meta_dims[-1] == fusion_dim "
                f"({self.meta_dims[-1]} != {self.fusion_dim})")
        if self.meta_input_dim < 1:
            raise ConfigError("meta_input_dim must be set to the encoded metadata length")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if not self.init_gain > 0:
            raise ConfigError("init_gain must be positive")
        if self.sr_factor < 1 or self.sr_factor & (self.sr_factor - 1):
            raise ConfigError("sr_factor must be a power of two")
        ratio = self.sr_factor * self.input_size / self.feature_extent
        stages = math.log2(ratio)
        if stages != int(stages) or stages > DECODER_LAYERS:
            raise ConfigError(
                f"decoder needs log2({ratio:g}) = {stages:g} upsampling stages; "
                f"must be an integer <= {DECODER_LAYERS}")
        dec = self.resolved_decoder_channels()
        if len(dec) != DECODER_LAYERS or dec[-1] != 3:
            raise ConfigError(f"decoder_channels must list {DECODER_LAYERS} widths ending in 3")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ForwardOutput:
    logits: Tensor
    sr_pred: Tensor
    embedding: Tensor
    fv_image: Tensor
    fv_meta: Tensor
    feature_map: Tensor


class ModelBundle:
    """Learnable parameters plus the configuration that shaped them.

    ``extras`` carries JSON-serialisable context (schema, imputation state,
    preprocessing settings) and ``buffers`` non-learnable arrays, both
    persisted in checkpoints.
    """

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]",
                 extras: Optional[dict] = None, buffers: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.params = params
        self.extras = extras or {}
        self.buffers = buffers or {}

    def parameters(self, prefix: str = "") -> List[Tensor]:
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def trainable_parameters(self) -> List[Tensor]:
        # the metadata encoder is bypassed entirely in the image-only ablation
        skip = "meta." if self.config.image_only else None
        return [p for name, p in self.params.items() if not (skip and name.startswith(skip))]

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    shapes: "OrderedDict[str, tuple]" = OrderedDict()
    c_in = 3
    for i, c in enumerate(config.encoder_channels):
        shapes[f"encoder.{i}.weight"] = (c, c_in, 3, 3)
        shapes[f"encoder.{i}.bias"] = (c,)
        c_in = c
    shapes["bridge.weight"] = (config.fusion_dim, c_in, 1, 1)
    shapes["bridge.bias"] = (config.fusion_dim,)
    d_in = config.meta_input_dim
    for i, d in enumerate(config.meta_dims):
        shapes[f"meta.{i}.weight"] = (d_in, d)
        shapes[f"meta.{i}.bias"] = (d,)
        d_in = d
    fused = config.fusion_dim if config.fusion_mode == "multiply" \
        else config.fusion_dim + config.meta_dims[-1]
    shapes["classifier.0.weight"] = (fused, config.classifier_hidden)
    shapes["classifier.0.bias"] = (config.classifier_hidden,)
    shapes["classifier.1.weight"] = (config.classifier_hidden, config.n_classes)
    shapes["classifier.1.bias"] = (config.n_classes,)
    d_in = c_in
    for i, c in enumerate(config.resolved_decoder_channels()):
        shapes[f"decoder.{i}.weight"] = (c, d_in, 3, 3)
        shapes[f"decoder.{i}.bias"] = (c,)
        d_in = c
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def build_model(config: ModelConfig, dtype=None) -> ModelBundle:
    """Seeded fan-in uniform initialisation, bound ``init_gain * sqrt(1 / fan_in)``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    dtype = dtype or get_dtype()
    shapes = parameter_shapes(config)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, shape in shapes.items():
        weight_name = name[: -len("bias")] + "weight" if name.endswith("bias") else name
        bound = config.init_gain * math.sqrt(1.0 / _fan_in(weight_name, shapes[weight_name]))
        values = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(values, requires_grad=True, name=name, dtype=dtype)
    d = config.meta_input_dim
    buffers = {"input_mean": np.zeros(3, dtype=np.float32), "input_std": np.ones(3, dtype=np.float32),
               "meta_mean": np.zeros(d, dtype=np.float32), "meta_std": np.ones(d, dtype=np.float32)}
    return ModelBundle(config, params, buffers=buffers)


def set_input_statistics(bundle: ModelBundle, images: np.ndarray, meta: np.ndarray) -> None:
    """Store training-set mean/std of both inputs; every forward pass centres with them.

    Plain SGD cannot make progress while the pooled features are a large
    constant plus a tiny sample-dependent part; centring the inputs fixes
    that conditioning without adding learnable state.
    """
    images = np.asarray(images, dtype=np.float64)
    meta = np.asarray(meta, dtype=np.float64)
    if images.ndim != 4 or images.shape[-1] != 3 or len(images) == 0:
        raise ShapeError(f"expected non-empty N×H×W×3 images, got {images.shape}")
    if meta.shape != (len(images), bundle.config.meta_input_dim):
        raise ShapeError(f"expected {len(images)}×{bundle.config.meta_input_dim} metadata, got {meta.shape}")
    bundle.buffers["input_mean"] = images.mean(axis=(0, 1, 2)).astype(np.float32)
    bundle.buffers["input_std"] = np.maximum(images.std(axis=(0, 1, 2)), 1e-3).astype(np.float32)
    bundle.buffers["meta_mean"] = meta.mean(axis=0).astype(np.float32)
    # constant columns (never observed in training) are only shifted
    bundle.buffers["meta_std"] = np.where(meta.std(axis=0) > 1e-6, meta.std(axis=0), 1.0).astype(np.float32)


def _standardize(x: Tensor, mean, std, shape) -> Tensor:
    if mean is None or std is None:
        return x
    return mul(sub(x, Tensor(mean.reshape(shape))), Tensor((1.0 / std).reshape(shape)))


def visual_forward(bundle: ModelBundle, images: Tensor):
    cfg = bundle.config
    if images.ndim != 4 or images.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ShapeError(
            f"images must be N×3×{cfg.input_size}×{cfg.input_size}, got {images.shape}")
    x = _standardize(images, bundle.buffers.get("input_mean"), bundle.buffers.get("input_std"),
                     (1, 3, 1, 1))
    for i in range(len(cfg.encoder_channels)):
        x = relu(conv2d(x, bundle[f"encoder.{i}.weight"], bundle[f"encoder.{i}.bias"],
                        stride=2, padding=1))
    feature_map = x
    b = relu(conv2d(x, bundle["bridge.weight"], bundle["bridge.bias"]))
    fv_image = flatten(adaptive_avg_pool(b, 1, 1))
    return feature_map, fv_image


def meta_forward(bundle: ModelBundle, encoded_meta: Tensor) -> Tensor:
    cfg = bundle.config
    if encoded_meta.ndim != 2 or encoded_meta.shape[1] != cfg.meta_input_dim:
        raise ShapeError(
            f"metadata must be N×{cfg.meta_input_dim}, got {encoded_meta.shape}")
    x = _standardize(encoded_meta, bundle.buffers.get("meta_mean"), bundle.buffers.get("meta_std"),
                     (1, cfg.meta_input_dim))
    n = len(cfg.meta_dims)
    for i in range(n):
        x = linear(x, bundle[f"meta.{i}.weight"], bundle[f"meta.{i}.bias"])
        if i < n - 1:
            x = relu(x)
    return x


def fuse(fv_image: Tensor, fv_meta: Tensor, mode: str = "multiply") -> Tensor:
    if mode == "multiply":
        return elementwise_mul(fv_image, fv_meta)
    if mode == "concat":
        return concat([fv_image, fv_meta], axis=1)
    raise ConfigError(f"unknown fusion mode {mode!r}")


def classify_forward(bundle: ModelBundle, fv_final: Tensor) -> Tensor:
    w0 = bundle["classifier.0.weight"]
    if fv_final.ndim != 2 or fv_final.shape[1] != w0.shape[0]:
        raise ShapeError(f"classifier expects N×{w0.shape[0]}, got {fv_final.shape}")
    h = relu(linear(fv_final, w0, bundle["classifier.0.bias"]))
    return linear(h, bundle["classifier.1.weight"], bundle["classifier.1.bias"])


def sr_decode(bundle: ModelBundle, feature_map: Tensor) -> Tensor:
    """Six 3x3 conv layers; the first ``upsample_stages`` are preceded by a
    nearest-neighbour x2 upsample.  Sigmoid output."""
    cfg = bundle.config
    stages = cfg.upsample_stages
    x = feature_map
    for i in range(DECODER_LAYERS):
        if i < stages:
            x = nearest_upsample(x, 2)
        x = conv2d(x, bundle[f"decoder.{i}.weight"], bundle[f"decoder.{i}.bias"], padding=1)
        x = relu(x) if i < DECODER_LAYERS - 1 else sigmoid(x)
    return x


def forward(bundle: ModelBundle, images: Tensor, encoded_meta: Tensor,
            with_sr: bool = True) -> ForwardOutput:
    cfg = bundle.config
    if images.shape[0] != encoded_meta.shape[0]:
        raise ShapeError(f"batch sizes differ: {images.shape[0]} images, "
                         f"{encoded_meta.shape[0]} metadata rows")
    feature_map, fv_image = visual_forward(bundle, images)
    if cfg.image_only:
        fv_meta = Tensor(np.ones((images.shape[0], cfg.meta_dims[-1]), dtype=images.data.dtype))
    else:
        fv_meta = meta_forward(bundle, encoded_meta)
    embedding = fuse(fv_image, fv_meta, cfg.fusion_mode)
    logits = classify_forward(bundle, embedding)
    sr_pred = sr_decode(bundle, feature_map) if with_sr else None
    return ForwardOutput(logits, sr_pred, embedding, fv_image, fv_meta, feature_map)
