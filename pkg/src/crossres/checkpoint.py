"""Single-file checkpoint container.

Layout, all little-endian:

    8 bytes   magic  b"XRESCKP1"
    8 bytes   uint64 header length in bytes
    N bytes   UTF-8 JSON header: {"format_version", "step", "config",
              "extra", "arrays": [{"name", "shape"}, ...]}
    payload   the arrays, float64 C-order, in header order
    32 bytes  SHA-256 over everything above

Arrays are stored as float64 regardless of their in-memory dtype; float32
parameters survive the round trip losslessly, so a restored model's forward
pass is bit-identical. Loading validates magic, version, and checksum
before returning anything; callers validate names/shapes against their own
state before mutating it, so a failed restore leaves the model untouched.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XRESCKP1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or invalid checkpoint file."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Checksum mismatch or truncated/garbled file."""


class CheckpointIncompatibleError(CheckpointError):
    """Checkpoint is well-formed but does not fit the target model; the
    message names the first mismatched array."""


def save_checkpoint(
    path: str | Path,
    arrays: dict[str, np.ndarray],
    step: int,
    config: dict,
    extra: dict | None = None,
) -> None:
    """Write arrays plus metadata to ``path`` atomically (tmp + rename)."""
    names = sorted(arrays)
    payloads = [np.ascontiguousarray(np.asarray(arrays[n], dtype="<f8")) for n in names]
    header = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "config": config,
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(p.shape)} for n, p in zip(names, payloads)],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        for chunk in [MAGIC, struct.pack("<Q", len(header_bytes)), header_bytes]:
            fh.write(chunk)
            digest.update(chunk)
        for p in payloads:
            buf = p.tobytes()
            fh.write(buf)
            digest.update(buf)
        fh.write(digest.digest())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and fully validate a checkpoint; returns (header, arrays)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 8 + 32:
        raise CheckpointCorruptError(f"{path}: file too short to be a checkpoint")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError(f"{path}: bad magic {blob[:8]!r}")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    (header_len,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(blob[start : start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version!r}, this build reads {FORMAT_VERSION}"
        )
    arrays: dict[str, np.ndarray] = {}
    offset = start + header_len
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise CheckpointCorruptError(f"{path}: truncated payload for '{entry['name']}'")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob) - 32:
        raise CheckpointCorruptError(f"{path}: {len(blob) - 32 - offset} trailing payload bytes")
    return header, arrays


def match_arrays(
    arrays: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]]
) -> None:
    """Check that ``arrays`` covers exactly ``expected`` (name -> shape);
    raises :class:`CheckpointIncompatibleError` naming the first mismatch."""
    for name in sorted(expected):
        if name not in arrays:
            raise CheckpointIncompatibleError(f"checkpoint is missing array '{name}'")
        got = tuple(arrays[name].shape)
        want = tuple(expected[name])
        if got != want:
            raise CheckpointIncompatibleError(
                f"array '{name}' has shape {got}, model expects {want}"
            )
    for name in sorted(arrays):
        if name not in expected:
            raise CheckpointIncompatibleError(f"checkpoint has unexpected array '{name}'")
