"""Dataset plumbing shared by the trainer, eval and routing-stats paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .events import DataError, chunk_sequence, load_events_csv
from .storage import load_manifest, read_tensor
from .synth import SynthSample, synth_task


@dataclass
class Sample:
    rgb: np.ndarray | None  # (m, H, W, C)
    vox: np.ndarray | None  # (m, H, W, bins)
    label: int
    condition: str


def from_synth(samples: list[SynthSample]) -> list[Sample]:
    return [
        Sample(rgb=s.rgb, vox=s.vox, label=s.label, condition=s.condition)
        for s in samples
    ]


def _voxels_from_events_file(path, config: TrainConfig) -> np.ndarray:
    if str(path).endswith(".csv"):
        events = load_events_csv(path)
        if events.shape[0] == 0:
            raise DataError(f"{path}: empty event stream")
        t_lo, t_hi = int(events[0, 0]), int(events[-1, 0])
        if t_hi == t_lo:
            t_hi = t_lo + 1
        grids = chunk_sequence(
            events,
            config.m_frames,
            (t_lo, t_hi),
            config.image_size,
            config.image_size,
            config.bins,
        )
        return np.stack([g.data.data for g in grids])
    vox = read_tensor(path)
    if vox.ndim != 4:
        raise DataError(
            f"{path}: precomputed voxel tensor must be (m, H, W, bins), got {vox.shape}"
        )
    if vox.shape[0] != config.m_frames or vox.shape[3] != config.bins:
        raise DataError(
            f"{path}: voxel tensor {vox.shape} disagrees with "
            f"m={config.m_frames}, bins={config.bins}"
        )
    return vox


def from_manifest(path, config: TrainConfig) -> list[Sample]:
    """Load every manifest sample into memory as arrays."""
    entries = load_manifest(path, n_classes=config.n_classes)
    samples = []
    for e in entries:
        frames = [read_tensor(p) for p in e["rgb"]]
        for p, f in zip(e["rgb"], frames):
            if f.ndim != 3:
                raise DataError(f"{p}: frame tensors must be (H, W, C), got {f.shape}")
        if len(frames) != config.m_frames:
            raise DataError(
                f"sample lists {len(frames)} frames, config wants {config.m_frames}"
            )
        samples.append(
            Sample(
                rgb=np.stack(frames),
                vox=_voxels_from_events_file(e["events"], config),
                label=e["label"],
                condition=e["condition"],
            )
        )
    return samples


def resolve_dataset(config: TrainConfig, synthetic: bool) -> list[Sample]:
    if synthetic:
        return from_synth(synth_task(config.seed, config.synth_samples, config))
    if not config.manifest:
        raise DataError("no dataset: pass --synthetic or set manifest= in the config")
    return from_manifest(config.manifest, config)


def stack_batch(samples: list[Sample]):
    """Stack sample arrays; returns (rgb, vox, labels) with None for absent."""
    rgb = None
    vox = None
    if samples[0].rgb is not None:
        rgb = np.stack([s.rgb for s in samples])
    if samples[0].vox is not None:
        vox = np.stack([s.vox for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return rgb, vox, labels


def split_dataset(samples: list[Sample], holdout_frac: float, seed: int):
    """Seed-stable shuffle, then an 80/20-style tail split."""
    perm = np.random.default_rng([seed, 0x5B117]).permutation(len(samples))
    n_holdout = max(1, int(round(len(samples) * holdout_frac)))
    train_idx, holdout_idx = perm[:-n_holdout], perm[-n_holdout:]
    return [samples[i] for i in train_idx], [samples[i] for i in holdout_idx]
