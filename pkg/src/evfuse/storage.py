"""Tensor files, checkpoints and dataset manifests.

Tensor file format ("MCOT"): magic bytes ``MCOT``, version byte 1, a u8
rank, rank little-endian u32 dims, then the row-major float32 payload in
little-endian order.  A checkpoint is an ordered archive of named tensors:
u32 name length, UTF-8 name, then a full MCOT record, repeated.

Values are stored at float32 precision; in-memory computation is float64.
Model parameters are snapped to the float32 grid after every optimizer
step (see trainer), which makes checkpoint round trips lossless.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .events import DataError
from .metrics import CONDITIONS

MAGIC = b"MCOT"
VERSION = 1


def quantize32(arr: np.ndarray) -> np.ndarray:
    """Snap float64 values onto the float32 grid (still stored as float64)."""
    return arr.astype(np.float32).astype(np.float64)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim > 255:
        raise DataError(f"rank {arr.ndim} exceeds the format limit of 255")
    header = MAGIC + bytes([VERSION, arr.ndim])
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return header + payload


def read_tensor(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    arr, consumed = _parse_tensor(data, 0, str(path))
    if consumed != len(data):
        raise DataError(f"{path}: {len(data) - consumed} trailing bytes")
    return arr


def _parse_tensor(data: bytes, offset: int, where: str) -> tuple[np.ndarray, int]:
    if data[offset : offset + 4] != MAGIC:
        raise DataError(f"{where}: bad magic bytes (not an MCOT tensor)")
    version = data[offset + 4]
    if version != VERSION:
        raise DataError(f"{where}: unsupported version {version}")
    rank = data[offset + 5]
    pos = offset + 6
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack_from("<I", data, pos)
        dims.append(d)
        pos += 4
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    end = pos + 4 * count
    if end > len(data):
        raise DataError(f"{where}: truncated tensor payload")
    values = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float64)
    return values.reshape(dims), end


def write_checkpoint(path: str | Path, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Serialize an ordered list of (name, array) pairs."""
    chunks = []
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(tensor_bytes(arr))
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path: str | Path) -> list[tuple[str, np.ndarray]]:
    data = Path(path).read_bytes()
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise DataError(f"{path}: truncated entry header")
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        arr, pos = _parse_tensor(data, pos, f"{path}[{name}]")
        out.append((name, arr))
    return out


# ---------------------------------------------------------------------------
# dataset manifests


def load_manifest(path: str | Path, n_classes: int = 7) -> list[dict]:
    """Parse a JSON-lines manifest and validate every referenced file.

    Each line holds {"rgb": [paths], "events": path, "label": int,
    "condition": str}; paths are resolved relative to the manifest.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    samples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            entry = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        for key in ("rgb", "events", "label", "condition"):
            if key not in entry:
                raise DataError(f"{path}:{lineno}: missing key {key!r}")
        if not isinstance(entry["rgb"], list) or not entry["rgb"]:
            raise DataError(f"{path}:{lineno}: 'rgb' must be a non-empty list")
        label = entry["label"]
        if not isinstance(label, int) or not 0 <= label < n_classes:
            raise DataError(
                f"{path}:{lineno}: label must be an int in [0, {n_classes}), got {label!r}"
            )
        if entry["condition"] not in CONDITIONS:
            raise DataError(
                f"{path}:{lineno}: condition must be one of {CONDITIONS}, "
                f"got {entry['condition']!r}"
            )
        rgb_paths = [base / p for p in entry["rgb"]]
        events_path = base / entry["events"]
        for p in rgb_paths + [events_path]:
            if not p.exists():
                raise DataError(f"{path}:{lineno}: referenced file missing: {p}")
        samples.append(
            {
                "rgb": rgb_paths,
                "events": events_path,
                "label": label,
                "condition": entry["condition"],
            }
        )
    if not samples:
        raise DataError(f"{path}: manifest holds no samples")
    return samples


def write_manifest(path: str | Path, entries: list[dict]) -> None:
    lines = [json.dumps(e) for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
