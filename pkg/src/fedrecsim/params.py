"""Flat parameter vectors with named segments, plus the checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

REQUIRED_SEGMENTS = ("news_model", "user_model")
CHECKPOINT_MAGIC = b"FRLB"
CHECKPOINT_VERSION = 1


class LayoutError(ValueError):
    """Raised when two parameter layouts disagree or a layout is malformed."""


@dataclass(frozen=True)
class SegmentMap:
    entries: tuple[tuple[str, int, int], ...]

    def __post_init__(self):
        expected = 0
        seen = set()
        for name, offset, length in self.entries:
            if name in seen:
                raise LayoutError(f"duplicate segment name {name!r}")
            if offset != expected or length < 0:
                raise LayoutError(f"segment {name!r} is not contiguous at offset {offset}")
            seen.add(name)
            expected += length
        missing = [n for n in REQUIRED_SEGMENTS if n not in seen]
        if missing:
            raise LayoutError(f"layout is missing required segments {missing}")

    @classmethod
    def from_lengths(cls, lengths: dict[str, int]) -> "SegmentMap":
        entries = []
        offset = 0
        for name, length in lengths.items():
            entries.append((name, offset, int(length)))
            offset += int(length)
        return cls(tuple(entries))

    @property
    def total_len(self) -> int:
        if not self.entries:
            return 0
        _, offset, length = self.entries[-1]
        return offset + length

    @property
    def names(self) -> list[str]:
        return [name for name, _, _ in self.entries]

    def span(self, name: str) -> slice:
        for entry_name, offset, length in self.entries:
            if entry_name == name:
                return slice(offset, offset + length)
        raise KeyError(f"unknown segment {name!r}; known: {self.names}")


@dataclass
class ParamVector:
    values: np.ndarray
    layout: SegmentMap

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] != self.layout.total_len:
            raise LayoutError(
                f"values have shape {self.values.shape}, layout expects {self.layout.total_len}"
            )

    def segment(self, name: str) -> np.ndarray:
        return segment_slice(self.values, self.layout, name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


@dataclass
class ModelUpdate:
    delta: np.ndarray
    sample_size: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.sample_size < 0:
            raise ValueError("sample_size must be non-negative")


def diff_params(new: ParamVector, old: ParamVector) -> ModelUpdate:
    if new.layout != old.layout:
        raise LayoutError("cannot diff parameter vectors with different layouts")
    return ModelUpdate(new.values - old.values, 0)


def segment_slice(v: np.ndarray, layout: SegmentMap, name: str) -> np.ndarray:
    """Return a writable view of segment ``name`` inside ``v``."""
    return v[layout.span(name)]


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64)))


def save_checkpoint(path, params: ParamVector) -> None:
    """Write ``params`` as little-endian binary.

    Layout: magic, u32 version, u32 segment count, then per segment a u16
    name length, UTF-8 name, u64 offset and u64 length, then the raw f64
    values.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.layout.entries))]
    for name, offset, length in params.layout.entries:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<QQ", offset, length))
    parts.append(params.values.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ParamVector:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise LayoutError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise LayoutError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        offset, length = struct.unpack_from("<QQ", data, pos)
        pos += 16
        entries.append((name, offset, length))
    layout = SegmentMap(tuple(entries))
    expected = pos + 8 * layout.total_len
    if len(data) != expected:
        raise LayoutError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=pos, count=layout.total_len)
    return ParamVector(values.astype(np.float64), layout)
