"""Event-camera streams and voxel-grid accumulation.

An event is (t, x, y, p): a microsecond timestamp, pixel coordinates and a
signed polarity.  Voxelization bins in-window events into an H x W x B grid
by nearest (floor) temporal bin, accumulating signed polarity in integers
before the final float conversion so that grid mass exactly equals event
mass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Tensor

log = logging.getLogger(__name__)


class DataError(ValueError):
    """Malformed event data or unreadable input file."""


@dataclass(frozen=True)
class Event:
    t: int  # microseconds, non-negative
    x: int  # column, in [0, W)
    y: int  # row, in [0, H)
    p: int  # polarity, -1 or +1


@dataclass
class VoxelGrid:
    """Signed polarity counts over H x W cells and B temporal bins."""

    data: Tensor  # (H, W, B)
    t0: float  # window start, microseconds
    dt: float  # bin size, microseconds
    rejected: int = 0  # events dropped for out-of-bounds coordinates

    @property
    def bins(self) -> int:
        return self.data.shape[2]

    def mass(self) -> float:
        return float(self.data.data.sum())


def _as_array(events) -> np.ndarray:
    """Events as an (n, 4) int64 array with columns t, x, y, p."""
    if isinstance(events, np.ndarray):
        arr = np.asarray(events, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise DataError(f"event array must be (n, 4), got {arr.shape}")
        return arr
    rows = [(e.t, e.x, e.y, e.p) for e in events]
    return np.asarray(rows, dtype=np.int64).reshape(-1, 4)


def voxelize(
    events: Sequence[Event] | np.ndarray,
    height: int,
    width: int,
    bins: int,
    window: tuple[float, float],
) -> VoxelGrid:
    """Accumulate signed polarities into an (H, W, B) grid.

    Each in-window event adds its polarity to cell
    (y, x, floor((t - t_start)/dt)); an event exactly at t_end lands in the
    last bin.  Events outside the window are ignored; events with coordinates
    off the sensor are counted as rejected and reported, never silently
    folded in.
    """
    t_start, t_end = float(window[0]), float(window[1])
    if not t_end > t_start:
        raise ContractError(f"window end {t_end} must exceed start {t_start}")
    if bins < 1:
        raise ContractError(f"bins must be >= 1, got {bins}")
    if height < 1 or width < 1:
        raise ContractError(f"sensor dims must be positive, got {height}x{width}")
    arr = _as_array(events)
    dt = (t_end - t_start) / bins
    grid = np.zeros((height, width, bins), dtype=np.int64)
    rejected = 0
    if arr.shape[0]:
        t, x, y, p = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
        in_window = (t >= t_start) & (t <= t_end)
        bad = np.abs(p) != 1
        if bad.any():
            raise DataError(
                f"polarity must be -1 or +1; found {np.unique(p[bad]).tolist()}"
            )
        oob = in_window & ((x < 0) | (x >= width) | (y < 0) | (y >= height))
        rejected = int(oob.sum())
        if rejected:
            log.warning("voxelize: rejected %d out-of-bounds events", rejected)
        keep = in_window & ~oob
        if keep.any():
            b = np.floor((t[keep] - t_start) / dt).astype(np.int64)
            b = np.minimum(b, bins - 1)  # t == t_end maps into the last bin
            np.add.at(grid, (y[keep], x[keep], b), p[keep])
    return VoxelGrid(
        data=Tensor(grid.astype(np.float64)), t0=t_start, dt=dt, rejected=rejected
    )


def chunk_sequence(
    events: Sequence[Event] | np.ndarray,
    m: int,
    span: tuple[float, float],
    height: int,
    width: int,
    bins: int,
) -> list[VoxelGrid]:
    """Split ``span`` into ``m`` equal sub-windows and voxelize each.

    Sub-windows partition the span (each internal boundary belongs to the
    window on its right), so summed grid mass equals total in-span mass.
    """
    if m < 1:
        raise ContractError(f"m must be >= 1, got {m}")
    t_start, t_end = float(span[0]), float(span[1])
    if not t_end > t_start:
        raise ContractError(f"span end {t_end} must exceed start {t_start}")
    arr = _as_array(events)
    edges = [t_start + (t_end - t_start) * i / m for i in range(m + 1)]
    grids = []
    for i in range(m):
        lo, hi = edges[i], edges[i + 1]
        if i < m - 1:
            mask = (arr[:, 0] >= lo) & (arr[:, 0] < hi)
        else:
            mask = (arr[:, 0] >= lo) & (arr[:, 0] <= hi)
        grids.append(voxelize(arr[mask], height, width, bins, (lo, hi)))
    return grids


def load_events_csv(path: str | Path) -> np.ndarray:
    """Parse a ``t,x,y,p`` CSV into an (n, 4) int64 array sorted by t.

    A header line ``t,x,y,p`` is optional and skipped.  Out-of-order events
    are sorted on ingest; real recordings jitter.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read event file {path}: {exc}") from exc
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.replace(" ", "") == "t,x,y,p":
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        try:
            t, x, y, p = (int(v) for v in parts)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from exc
        if t < 0:
            raise DataError(f"{path}:{lineno}: negative timestamp {t}")
        if p not in (-1, 1):
            raise DataError(f"{path}:{lineno}: polarity must be -1 or 1, got {p}")
        rows.append((t, x, y, p))
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    order = np.argsort(arr[:, 0], kind="stable")
    return arr[order]


def write_events_csv(path: str | Path, events: np.ndarray) -> None:
    arr = _as_array(events)
    lines = ["t,x,y,p"]
    lines += [f"{t},{x},{y},{p}" for t, x, y, p in arr.tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
