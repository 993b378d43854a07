"""Descriptor records, the binary descriptor file format and dataset manifests.

A descriptor file holds one video's located local descriptors::

    magic "STED" | version u32 | width u32 | height u32 | frames u32 | dim u32
    | records: x f32, y f32, t f32, phi dim x f32

All fields little-endian.  The header is exactly 24 bytes; the record count
is implied by the file length.  Locations are stored raw (pixels, frame
index) and normalized on demand by :func:`normalize_locations`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"STED"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")  # magic, version, width, height, frames, dim
HEADER_BYTES = _HEADER.size  # 24


class DataError(ValueError):
    """Base class for invalid input data."""


class FormatError(DataError):
    """Malformed or truncated binary file."""


class BoundsError(DataError):
    """Descriptor location outside the video header bounds."""


class NonFiniteError(DataError):
    """NaN or infinity in descriptor values."""


class ManifestError(DataError):
    """Invalid dataset manifest."""


@dataclass(frozen=True)
class VideoHeader:
    width: int
    height: int
    frames: int
    dim: int

    def __post_init__(self):
        for name in ("width", "height", "frames", "dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class LocalDescriptor:
    x: float
    y: float
    t: float
    phi: np.ndarray


@dataclass(frozen=True, eq=False)
class VideoDescriptorSet:
    """One video's descriptors, stored column-wise.

    ``xyt`` is an ``(M, 3)`` float32 array of raw locations and ``phi`` an
    ``(M, dim)`` float32 array.  Construction validates bounds and finiteness.
    """

    header: VideoHeader
    xyt: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        xyt = np.ascontiguousarray(self.xyt, dtype=np.float32).reshape(-1, 3)
        phi = np.ascontiguousarray(self.phi, dtype=np.float32)
        if phi.size == 0:
            phi = phi.reshape(xyt.shape[0], self.header.dim)
        if phi.ndim != 2 or phi.shape[1] != self.header.dim:
            raise ValueError(f"phi must have shape (M, {self.header.dim}), got {phi.shape}")
        if phi.shape[0] != xyt.shape[0]:
            raise ValueError("xyt and phi disagree on descriptor count")
        if not (np.isfinite(xyt).all() and np.isfinite(phi).all()):
            raise NonFiniteError("descriptor set contains non-finite values")
        h = self.header
        x, y, t = xyt[:, 0], xyt[:, 1], xyt[:, 2]
        if (
            (x < 0).any() or (x >= h.width).any()
            or (y < 0).any() or (y >= h.height).any()
            or (t < 0).any() or (t > h.frames - 1).any()
        ):
            raise BoundsError("descriptor location outside header bounds")
        xyt.flags.writeable = False
        phi.flags.writeable = False
        object.__setattr__(self, "xyt", xyt)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def from_descriptors(cls, header: VideoHeader, descriptors: Sequence[LocalDescriptor]):
        xyt = np.array([(d.x, d.y, d.t) for d in descriptors], dtype=np.float32).reshape(-1, 3)
        phi = np.array([np.asarray(d.phi) for d in descriptors], dtype=np.float32)
        return cls(header, xyt, phi.reshape(len(descriptors), header.dim))

    def __len__(self) -> int:
        return self.xyt.shape[0]

    def __iter__(self) -> Iterator[LocalDescriptor]:
        for (x, y, t), phi in zip(self.xyt, self.phi):
            yield LocalDescriptor(float(x), float(y), float(t), phi)

    @property
    def descriptors(self) -> list[LocalDescriptor]:
        return list(self)

    def __eq__(self, other):
        if not isinstance(other, VideoDescriptorSet):
            return NotImplemented
        return (
            self.header == other.header
            and self.xyt.tobytes() == other.xyt.tobytes()
            and self.phi.tobytes() == other.phi.tobytes()
        )


def to_bytes(video: VideoDescriptorSet) -> bytes:
    h = video.header
    records = np.concatenate([video.xyt, video.phi], axis=1).astype("<f4", copy=False)
    return (
        _HEADER.pack(MAGIC, VERSION, h.width, h.height, h.frames, h.dim)
        + records.tobytes()
    )


def from_bytes(buf: bytes) -> VideoDescriptorSet:
    if len(buf) < HEADER_BYTES:
        raise FormatError("truncated header")
    magic, version, width, height, frames, dim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    try:
        header = VideoHeader(width, height, frames, dim)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    record = 4 * (3 + dim)
    n, rem = divmod(len(buf) - HEADER_BYTES, record)
    if rem:
        raise FormatError(f"truncated record: {rem} trailing bytes")
    records = np.frombuffer(buf, dtype="<f4", offset=HEADER_BYTES).reshape(n, 3 + dim)
    return VideoDescriptorSet(header, records[:, :3], records[:, 3:])


def write_video_file(video: VideoDescriptorSet, path) -> None:
    Path(path).write_bytes(to_bytes(video))


def read_video_file(path) -> VideoDescriptorSet:
    return from_bytes(Path(path).read_bytes())


def normalize_locations(video: VideoDescriptorSet) -> np.ndarray:
    """Map raw locations to ``(u, v, w)`` in ``[0, 1]``, shape ``(M, 3)``.

    u = x / width, v = y / height, w = t / max(frames - 1, 1).
    """
    h = video.header
    scale = np.array([h.width, h.height, max(h.frames - 1, 1)], dtype=np.float64)
    uvw = video.xyt.astype(np.float64) / scale
    # exact for in-bounds input; clip only guards the closed interval
    return np.clip(uvw, 0.0, 1.0)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: str
    group: str = ""
    channels: tuple[str, ...] = ()

    @property
    def paths(self) -> tuple[str, ...]:
        """Descriptor files, one per channel (a single channel by default)."""
        return self.channels or (self.path,)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    label_set: tuple[str, ...]
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "label_set", tuple(self.label_set))
        if len(set(self.label_set)) != len(self.label_set):
            raise ManifestError("duplicate labels in label set")
        seen = set()
        known = set(self.label_set)
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            seen.add(e.id)
            if e.label not in known:
                raise ManifestError(f"entry {e.id!r} has unknown label {e.label!r}")
        widths = {len(e.paths) for e in self.entries}
        if len(widths) > 1:
            raise ManifestError("entries disagree on channel count")

    @property
    def num_channels(self) -> int:
        return len(self.entries[0].paths) if self.entries else 1

    @property
    def groups(self) -> list[str]:
        """Distinct groups in first-appearance order."""
        return list(dict.fromkeys(e.group for e in self.entries))

    def require_groups(self) -> None:
        missing = [e.id for e in self.entries if not e.group]
        if missing:
            raise ManifestError(f"entries without group: {missing[:5]}")

    def subset(self, entries: Sequence[ManifestEntry]) -> "DatasetManifest":
        return DatasetManifest(tuple(entries), self.label_set, self.root)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def read(self, entry: ManifestEntry, channel: int = 0) -> VideoDescriptorSet:
        return read_video_file(self.resolve(entry.paths[channel]))

    def to_json(self) -> dict:
        entries = []
        for e in self.entries:
            item = {"id": e.id, "path": e.path, "label": e.label, "group": e.group}
            if e.channels:
                item["channels"] = list(e.channels)
            entries.append(item)
        return {"entries": entries, "labels": list(self.label_set)}

    @classmethod
    def from_json(cls, doc: dict, root=".") -> "DatasetManifest":
        try:
            entries = [
                ManifestEntry(
                    id=str(item["id"]),
                    path=str(item["path"]),
                    label=str(item["label"]),
                    group=str(item.get("group", "")),
                    channels=tuple(str(c) for c in item.get("channels", ())),
                )
                for item in doc["entries"]
            ]
            labels = [str(x) for x in doc["labels"]]
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from None
        return cls(tuple(entries), tuple(labels), Path(root))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return DatasetManifest.from_json(doc, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    text = json.dumps(manifest.to_json(), indent=1, sort_keys=False)
    Path(path).write_text(text + "\n", encoding="utf-8")
