"""End-to-end model: encoders -> coupled SSM -> cross fusion -> expert head.

The stage flags in :class:`TrainConfig` swap stages out structurally:
``disable_ssm`` feeds encoder tokens straight to fusion, ``disable_fusion``
adds the two streams instead of cross-attending, ``disable_moe`` replaces
the expert head with one linear map, and ``modality`` zeroes the token
sequence of the missing stream.  Disabled stages own no parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .config import TrainConfig
from .encoder import EncoderConfig, EncoderParams, encode_frames, init_encoder
from .events import DataError
from .fusion import AttentionWeights, cross_interact, gate_fuse, init_attention
from .moe import ExpertPool, RouterParams, expert_layout, init_expert_pool, init_router, moe_forward
from .ssm import CoupledSsmParams, coupled_ssm_forward, init_coupled_ssm
from .storage import quantize32, read_checkpoint, write_checkpoint

CONFIG_ENTRY = "__meta__/config_utf8"


@dataclass
class ModelParams:
    config: TrainConfig
    rgb_encoder: EncoderParams | None
    event_encoder: EncoderParams | None
    ssm_layers: list[CoupledSsmParams] = field(default_factory=list)
    fusion_rgb: AttentionWeights | None = None
    fusion_event: AttentionWeights | None = None
    router: RouterParams | None = None
    pool: ExpertPool | None = None
    head_w: Tensor | None = None
    head_b: Tensor | None = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.rgb_encoder is not None:
            out += self.rgb_encoder.named_params("rgb_encoder")
        if self.event_encoder is not None:
            out += self.event_encoder.named_params("event_encoder")
        for i, layer in enumerate(self.ssm_layers):
            out += layer.named_params(f"ssm.layer{i}")
        if self.fusion_rgb is not None:
            out += self.fusion_rgb.named_params("fusion.rgb")
            out += self.fusion_event.named_params("fusion.event")
        if self.router is not None:
            out += self.router.named_params("router")
            out += self.pool.named_params("pool")
        if self.head_w is not None:
            out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def build_model(config: TrainConfig, rng: np.random.Generator) -> ModelParams:
    """Construct and initialize all enabled stages.

    Draw order is fixed (rgb encoder, event encoder, scan layers, fusion,
    head) so a given seed always produces the same weights.  Initial values
    are snapped to the float32 grid to keep checkpoints lossless.
    """
    enc_channels = tuple(config.enc_channels) + (config.e_dim,)
    rgb_encoder = None
    event_encoder = None
    if config.modality in ("both", "rgb"):
        rgb_encoder = init_encoder(
            EncoderConfig(
                in_channels=config.rgb_channels,
                channels=enc_channels,
                kernel=config.enc_kernel,
                stride=config.enc_stride,
                tokens_per_frame=config.tokens_per_frame,
            ),
            rng,
        )
    if config.modality in ("both", "event"):
        event_encoder = init_encoder(
            EncoderConfig(
                in_channels=config.bins,
                channels=enc_channels,
                kernel=config.enc_kernel,
                stride=config.enc_stride,
                tokens_per_frame=config.tokens_per_frame,
            ),
            rng,
        )
    params = ModelParams(config=config, rgb_encoder=rgb_encoder, event_encoder=event_encoder)
    if not config.disable_ssm:
        params.ssm_layers = [
            init_coupled_ssm(
                config.e_dim, config.d_hidden, config.n_state, rng, config.conv_width
            )
            for _ in range(config.n_layers)
        ]
    if not config.disable_fusion:
        params.fusion_rgb = init_attention(config.e_dim, config.heads, rng)
        params.fusion_event = init_attention(config.e_dim, config.heads, rng)
    if config.disable_moe:
        bound = 1.0 / np.sqrt(config.e_dim)
        params.head_w = Tensor(
            rng.uniform(-bound, bound, (config.e_dim, config.n_classes)),
            requires_grad=True,
        )
        params.head_b = Tensor(np.zeros(config.n_classes), requires_grad=True)
    else:
        params.router = init_router(config.e_dim, config.n_experts, config.heads, rng)
        params.pool = init_expert_pool(
            config.e_dim,
            config.n_classes,
            expert_layout(config.expert_layout, config.n_experts),
            config.deep_depth,
            config.dropout,
            config.heads,
            rng,
        )
    for _, t in params.named_parameters():
        t.data[...] = quantize32(t.data)
    return params


def _encode_modality(
    frames: np.ndarray | None, encoder: EncoderParams | None, config: TrainConfig
) -> Tensor:
    """(B, m, H, W, C) frames to (B, M, E) tokens; zeros if the branch is off."""
    if encoder is None or frames is None:
        raise ContractError("internal: missing frames for an enabled modality")
    b, m = frames.shape[0], frames.shape[1]
    if m != config.m_frames:
        raise ContractError(f"expected {config.m_frames} frames per sample, got {m}")
    flat = Tensor(frames.reshape((b * m,) + frames.shape[2:]))
    tokens = encode_frames(flat, encoder)  # (B*m, T, E)
    return ad.reshape(tokens, (b, m * config.tokens_per_frame, config.e_dim))


def forward_batch(
    params: ModelParams,
    rgb: np.ndarray | None,
    vox: np.ndarray | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Class logits (B, J) for a batch of samples.

    ``rgb``: (B, m, H, W, C) frames; ``vox``: (B, m, H, W, bins) voxel
    grids.  A disabled modality's tokens are zeros of the right shape.
    """
    config = params.config
    if rgb is None and vox is None:
        raise ContractError("forward needs at least one modality's input")
    batch = (rgb if rgb is not None else vox).shape[0]
    zero_tokens = lambda: Tensor(np.zeros((batch, config.seq_len, config.e_dim)))
    f_tokens = (
        _encode_modality(rgb, params.rgb_encoder, config)
        if config.modality in ("both", "rgb")
        else zero_tokens()
    )
    e_tokens = (
        _encode_modality(vox, params.event_encoder, config)
        if config.modality in ("both", "event")
        else zero_tokens()
    )
    y_rgb, y_event = f_tokens, e_tokens
    for layer in params.ssm_layers:
        y_rgb, y_event = coupled_ssm_forward(y_rgb, y_event, layer)
    if params.fusion_rgb is not None:
        attended_rgb, attended_event = cross_interact(
            y_rgb, y_event, params.fusion_rgb, params.fusion_event
        )
        fused = gate_fuse(
            y_rgb, y_event, attended_rgb, attended_event, config.gate_reduction
        ).fused
    else:
        fused = y_rgb + y_event
    if params.head_w is not None:
        pooled = ad.tmean(fused, axis=-2)  # (B, E)
        return ad.matmul(pooled, params.head_w) + params.head_b
    logits = [
        moe_forward(
            ad.index_axis(fused, 0, i),
            params.pool,
            params.router,
            config.top_k,
            train=train,
            rng=rng,
        )
        for i in range(batch)
    ]
    return ad.stack(logits, axis=0)


def forward_full(
    params: ModelParams,
    rgb: np.ndarray | None,
    vox: np.ndarray | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Single-sample logits (J,); inputs are (m, H, W, C) / (m, H, W, bins)."""
    rgb_b = rgb[None] if rgb is not None else None
    vox_b = vox[None] if vox is not None else None
    return ad.index_axis(forward_batch(params, rgb_b, vox_b, train, rng), 0, 0)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, params: ModelParams) -> None:
    """Write the config (as UTF-8 bytes in a tensor) plus all parameters."""
    from .config import config_to_text

    blob = np.frombuffer(config_to_text(params.config).encode("utf-8"), dtype=np.uint8)
    entries = [(CONFIG_ENTRY, blob.astype(np.float64))]
    entries += [(name, t.data) for name, t in params.named_parameters()]
    write_checkpoint(path, entries)


def load_model(path) -> ModelParams:
    from .config import parse_config_text

    entries = read_checkpoint(path)
    if not entries or entries[0][0] != CONFIG_ENTRY:
        raise DataError(f"{path}: checkpoint missing the leading config entry")
    text = bytes(entries[0][1].astype(np.uint8)).decode("utf-8")
    config = parse_config_text(text, source=f"{path}[config]")
    params = build_model(config, np.random.default_rng(0))
    stored = dict(entries[1:])
    expected = [name for name, _ in params.named_parameters()]
    if sorted(stored) != sorted(expected):
        missing = set(expected) - set(stored)
        extra = set(stored) - set(expected)
        raise DataError(
            f"{path}: parameter names disagree with config"
            f" (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})"
        )
    for name, tensor in params.named_parameters():
        arr = stored[name]
        if arr.shape != tensor.shape:
            raise DataError(
                f"{path}: {name} has shape {arr.shape}, expected {tensor.shape}"
            )
        tensor.data[...] = arr
    return params


def predictions(params: ModelParams, samples: list[dict]) -> list[int]:
    """Argmax class for each sample dict with 'rgb'/'vox' arrays."""
    out = []
    for s in samples:
        logits = forward_full(params, s.get("rgb"), s.get("vox"))
        out.append(int(np.argmax(logits.data)))
    return out
