"""Convolutional token encoder for frames and voxel grids.

Each (H, W, C) tensor is pushed through a small stack of strided 2-D
convolutions with SiLU between layers and pooled into ``tokens_per_frame``
feature vectors.  Encoding a sequence of m frames concatenates the per-frame
tokens row-wise into an (m * T, E) feature sequence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""


@dataclass
class EncoderConfig:
    in_channels: int
    channels: tuple[int, ...] = (16, 32, 64)  # last entry is the token width E
    kernel: int = 3
    stride: int = 2
    activation: bool = True  # SiLU between layers; off gives a purely linear stack
    tokens_per_frame: int = 1

    @property
    def e_dim(self) -> int:
        return self.channels[-1]

    def __post_init__(self):
        if not self.channels:
            raise ConfigError("encoder needs at least one conv layer")
        if self.tokens_per_frame < 1:
            raise ConfigError("tokens_per_frame must be >= 1")
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError("kernel and stride must be positive")


@dataclass
class EncoderParams:
    config: EncoderConfig
    weights: list[Tensor] = field(default_factory=list)  # (K, K, Cin, Cout) each
    biases: list[Tensor] = field(default_factory=list)  # (Cout,) each, zero-init

    def named_params(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}.layer{i}.w", w))
            out.append((f"{prefix}.layer{i}.b", b))
        return out


@dataclass
class FeatureSequence:
    """Per-sample (M, E) token sequence for one modality."""

    tokens: Tensor
    modality: str  # "rgb" or "event"

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]

    @property
    def e_dim(self) -> int:
        return self.tokens.shape[-1]


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    params = EncoderParams(config=config)
    cin = config.in_channels
    k = config.kernel
    for cout in config.channels:
        bound = 1.0 / np.sqrt(k * k * cin)
        params.weights.append(
            Tensor(rng.uniform(-bound, bound, (k, k, cin, cout)), requires_grad=True)
        )
        params.biases.append(Tensor(np.zeros(cout), requires_grad=True))
        cin = cout
    return params


def _conv_stack(x: Tensor, params: EncoderParams) -> Tensor:
    cfg = params.config
    pad = cfg.kernel // 2
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = ad.conv2d(x, w, b, stride=cfg.stride, padding=pad)
        if cfg.activation and i < n_layers - 1:
            x = ad.silu(x)
    return x


def _pool_tokens(feat: Tensor, t: int) -> Tensor:
    """Pool a (..., H', W', E) map into (..., T, E) tokens.

    T = 1 is a global average; T > 1 averages T equal column strips.
    """
    if t == 1:
        return ad.expand_dims(ad.tmean(feat, axis=(-3, -2)), -2)
    w = feat.shape[-2]
    if w < t or w % t:
        raise ConfigError(
            f"cannot pool width {w} into {t} tokens; need w divisible by T"
        )
    strip = w // t
    cols = ad.tmean(feat, axis=-3)  # (..., W', E)
    tokens = [
        ad.tmean(ad.slice_axis(cols, -2, i * strip, (i + 1) * strip), axis=-2)
        for i in range(t)
    ]
    return ad.stack(tokens, axis=-2)


def encode_frames(frames: Tensor, params: EncoderParams) -> Tensor:
    """Encode (..., H, W, C) frames into (..., T, E) tokens."""
    cfg = params.config
    if frames.ndim < 3:
        raise ContractError(f"frames must be at least (H, W, C), got {frames.shape}")
    if frames.shape[-1] != cfg.in_channels:
        raise ConfigError(
            f"encoder configured for {cfg.in_channels} channels, "
            f"got frames with {frames.shape[-1]}"
        )
    if frames.shape[-3] < 8 or frames.shape[-2] < 8:
        raise ContractError(
            f"frame spatial dims must be >= 8, got {frames.shape[-3]}x{frames.shape[-2]}"
        )
    return _pool_tokens(_conv_stack(frames, params), cfg.tokens_per_frame)


def encode_frame(frame: Tensor, params: EncoderParams) -> Tensor:
    """Single (H, W, C) frame to (T, E) tokens. Deterministic given weights."""
    if frame.ndim != 3:
        raise ContractError(f"frame must be (H, W, C), got {frame.shape}")
    return encode_frames(frame, params)


def encode_sequence(
    frames: list[Tensor], params: EncoderParams, modality: str = "rgb"
) -> FeatureSequence:
    """Encode m frames into an (m * T, E) feature sequence.

    Tokens of frame i occupy rows [i*T, (i+1)*T).
    """
    if not frames:
        raise ContractError("encode_sequence requires at least one frame")
    shape = frames[0].shape
    for f in frames[1:]:
        if f.shape != shape:
            raise ContractError(
                f"all frames must share a shape; got {shape} and {f.shape}"
            )
    stacked = ad.stack(frames, axis=0)  # (m, H, W, C)
    tokens = encode_frames(stacked, params)  # (m, T, E)
    m, t, e = tokens.shape
    return FeatureSequence(tokens=ad.reshape(tokens, (m * t, e)), modality=modality)
