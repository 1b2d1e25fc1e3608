"""Run configuration and the flat key=value config-file format.

Dataclass defaults document the reference training recipe (batch 64,
200 epochs, lr 3e-4, weight decay 1e-3); :func:`desk_preset` shrinks
everything to sizes that train in minutes on one CPU core.  Unknown keys in
a config file are errors so that a typo in an ablation flag cannot silently
run the wrong experiment.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .encoder import ConfigError

_GATE_REDUCTIONS = ("mean", "sum")
_MODALITIES = ("both", "rgb", "event")


@dataclass
class TrainConfig:
    # architecture
    e_dim: int = 64  # token width
    d_hidden: int = 64  # scan channels (matches e_dim in the reference recipe)
    n_state: int = 16  # state columns per channel
    n_layers: int = 1  # stacked coupled-SSM blocks
    conv_width: int = 4
    heads: int = 4
    m_frames: int = 2
    bins: int = 3  # voxel-grid temporal bins
    rgb_channels: int = 3
    tokens_per_frame: int = 1
    enc_channels: tuple[int, ...] = (16, 32)  # hidden conv widths; a final conv emits e_dim
    enc_kernel: int = 3
    enc_stride: int = 2
    n_experts: int = 8
    top_k: int = 2
    expert_layout: str = "heterogeneous"
    deep_depth: int = 2
    dropout: float = 0.1
    n_classes: int = 7
    # optimization
    lr: float = 0.0003
    weight_decay: float = 0.001
    batch_size: int = 64
    epochs: int = 200
    max_steps: int = 0  # 0 = no cap
    seed: int = 0
    holdout_frac: float = 0.2
    manifest: str = ""
    out_dir: str = "runs"
    # synthetic task geometry
    image_size: int = 16
    synth_samples: int = 140
    event_window_us: int = 100_000
    # mode flags
    gate_reduction: str = "mean"  # 'sum' restores the raw-sum gate input
    modality: str = "both"
    disable_ssm: bool = False  # skip the coupled scan stage
    disable_fusion: bool = False  # replace cross-attention fusion with addition
    disable_moe: bool = False  # replace the expert head with one linear map

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = (
            "e_dim", "d_hidden", "n_state", "n_layers", "conv_width", "heads",
            "m_frames", "bins", "rgb_channels", "tokens_per_frame", "enc_kernel",
            "enc_stride", "n_experts", "top_k", "deep_depth", "n_classes",
            "batch_size", "epochs",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.top_k > self.n_experts:
            raise ConfigError(
                f"top_k={self.top_k} exceeds n_experts={self.n_experts}"
            )
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ConfigError(f"holdout_frac must lie in (0, 1), got {self.holdout_frac}")
        if self.gate_reduction not in _GATE_REDUCTIONS:
            raise ConfigError(
                f"gate_reduction must be one of {_GATE_REDUCTIONS}, "
                f"got {self.gate_reduction!r}"
            )
        if self.modality not in _MODALITIES:
            raise ConfigError(
                f"modality must be one of {_MODALITIES}, got {self.modality!r}"
            )
        if self.e_dim % self.heads:
            raise ConfigError(
                f"e_dim={self.e_dim} must be divisible by heads={self.heads}"
            )

    @property
    def seq_len(self) -> int:
        return self.m_frames * self.tokens_per_frame


def desk_preset(**overrides) -> TrainConfig:
    """Small sizes that overfit the synthetic task in a few minutes of CPU."""
    base = dict(
        e_dim=64,
        d_hidden=64,
        n_state=16,
        batch_size=16,
        epochs=30,
        lr=0.002,
        synth_samples=140,
        image_size=16,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _parse_value(name: str, raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        lowered = raw.lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if target_type is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from exc
    if target_type is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from exc
    if target_type is str:
        return raw
    # tuple[int, ...] for the encoder channel list
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: expected comma-separated ints, got {raw!r}") from exc


# field types taken from the defaults, so the parser stays in sync
_FIELD_TYPES = {
    f.name: type(getattr(TrainConfig(), f.name)) for f in fields(TrainConfig)
}


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, _FIELD_TYPES[key])
    return TrainConfig(**values)


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def config_to_text(config: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
