"""Synthetic 7-class bimodal dataset.

Each class gets a distinct signature in both streams: frames carry a
class-keyed sinusoidal pattern (frequency, orientation, phase drift over
frames), and the event stream places a class-keyed burst blob with a
class-dependent rate and temporal profile.  Per-sample noise keeps the task
non-trivial while staying linearly separable, so a model that cannot overfit
it is broken.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .config import TrainConfig
from .events import chunk_sequence, write_events_csv
from .metrics import CONDITIONS
from .storage import write_manifest, write_tensor


@dataclass
class SynthSample:
    rgb: np.ndarray  # (m, S, S, 3)
    vox: np.ndarray  # (m, S, S, bins)
    events: np.ndarray  # (n_events, 4) t,x,y,p
    label: int
    condition: str


def _frame_pattern(cls: int, size: int, frame_idx: int, rng) -> np.ndarray:
    fx = 1 + cls % 3
    fy = 1 + cls // 3
    phase = 2.0 * np.pi * cls / 7.0 + 0.9 * frame_idx
    ys, xs = np.mgrid[0:size, 0:size]
    base = np.sin(2.0 * np.pi * (fx * xs / size + fy * ys / size) + phase)
    frame = np.stack([base * (0.6 + 0.2 * c) for c in range(3)], axis=-1)
    return frame + rng.normal(0.0, 0.15, frame.shape)


def _event_burst(cls: int, size: int, window_us: int, rng) -> np.ndarray:
    n = int(rng.poisson(220 + 90 * cls))
    cx = (0.2 + 0.6 * ((cls * 3) % 7) / 6.0) * size
    cy = (0.2 + 0.6 * ((cls * 5) % 7) / 6.0) * size
    x = np.clip(np.round(rng.normal(cx, size / 6.0, n)), 0, size - 1)
    y = np.clip(np.round(rng.normal(cy, size / 6.0, n)), 0, size - 1)
    # concentrate a class-keyed fraction of events in one sub-slice of time
    focus = (cls % 3) / 3.0
    concentrated = rng.random(n) < 0.6
    t = np.where(
        concentrated,
        (focus + rng.random(n) / 3.0) * window_us,
        rng.random(n) * window_us,
    )
    p = np.where(rng.random(n) < 0.35 + 0.1 * cls, 1, -1)
    arr = np.stack([t.astype(np.int64), x.astype(np.int64), y.astype(np.int64), p], axis=1)
    return arr[np.argsort(arr[:, 0], kind="stable")]


def synth_task(seed: int, n_samples: int, config: TrainConfig) -> list[SynthSample]:
    """Generate a balanced, condition-tagged dataset.

    Labels cycle 0..J-1 (per-class counts differ by at most one) and
    lighting-condition tags cycle round-robin; both streams of one sample
    share the class but carry independent noise.
    """
    if n_samples < config.n_classes:
        raise ContractError(
            f"need at least {config.n_classes} samples, got {n_samples}"
        )
    root = np.random.default_rng([seed, 0xDA7A])
    size = config.image_size
    samples = []
    for i in range(n_samples):
        rng = np.random.default_rng(root.integers(0, 2**63 - 1, 2))
        cls = i % config.n_classes
        rgb = np.stack(
            [_frame_pattern(cls, size, f, rng) for f in range(config.m_frames)]
        )
        events = _event_burst(cls, size, config.event_window_us, rng)
        grids = chunk_sequence(
            events,
            config.m_frames,
            (0, config.event_window_us),
            size,
            size,
            config.bins,
        )
        vox = np.stack([g.data.data for g in grids])
        samples.append(
            SynthSample(
                rgb=rgb,
                vox=vox,
                events=events,
                label=cls,
                condition=CONDITIONS[i % len(CONDITIONS)],
            )
        )
    return samples


def export_manifest_dir(samples: list[SynthSample], directory) -> str:
    """Write frames as tensor files plus event CSVs and a JSONL manifest.

    Gives the file-based pipeline (manifest loading, voxelization from CSV)
    something real to chew on in tests and demos.
    """
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        rgb_paths = []
        for f in range(s.rgb.shape[0]):
            rel = f"sample{i:04d}_frame{f}.mcot"
            write_tensor(directory / rel, s.rgb[f])
            rgb_paths.append(rel)
        events_rel = f"sample{i:04d}_events.csv"
        write_events_csv(directory / events_rel, s.events)
        entries.append(
            {
                "rgb": rgb_paths,
                "events": events_rel,
                "label": s.label,
                "condition": s.condition,
            }
        )
    manifest_path = directory / "manifest.jsonl"
    write_manifest(manifest_path, entries)
    return str(manifest_path)
