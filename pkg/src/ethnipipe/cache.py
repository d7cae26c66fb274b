"""Binary cache of preprocessed network inputs.

One data file holds concatenated blobs; each blob is a 16-byte header
(magic "EPP1", height/width/channels as little-endian u16, 6 reserved
zero bytes) followed by the tensor's float32 samples, little-endian,
row-major. A sidecar text index maps sample id to blob offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingInputError

BLOB_MAGIC = b"EPP1"
HEADER_FORMAT = "<4sHHH6x"
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)
INDEX_HEADER = "#ethnipipe-cache-index v1"
SKIPLOG_HEADER = "#ethnipipe-skiplog v1"


def index_path_for(data_path: Path | str) -> Path:
    return Path(str(data_path) + ".idx")


class CacheWriter:
    """Appends preprocessed tensors to a cache file and records their offsets."""

    def __init__(self, data_path: Path | str):
        self.data_path = Path(data_path)
        self._file = open(self.data_path, "wb")
        self._offsets: dict[str, int] = {}

    def add(self, sample_id: str, tensor: np.ndarray) -> None:
        if sample_id in self._offsets:
            raise ValueError(f"duplicate cache entry for id {sample_id!r}")
        if "\t" in sample_id or "\n" in sample_id:
            raise ValueError("sample ids may not contain tabs or newlines")
        if tensor.ndim != 3:
            raise ValueError(f"expected a (H, W, C) tensor, got shape {tensor.shape}")
        h, w, c = tensor.shape
        payload = np.ascontiguousarray(tensor, dtype="<f4")
        self._offsets[sample_id] = self._file.tell()
        self._file.write(struct.pack(HEADER_FORMAT, BLOB_MAGIC, h, w, c))
        self._file.write(payload.tobytes())

    def close(self) -> None:
        self._file.close()
        lines = [INDEX_HEADER]
        lines.extend(f"{sid}\t{off}" for sid, off in self._offsets.items())
        index_path_for(self.data_path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def __enter__(self) -> "CacheWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class PreprocessedCache:
    """Read-only view over a cache file and its sidecar index."""

    def __init__(self, data_path: Path | str):
        self.data_path = Path(data_path)
        if not self.data_path.is_file():
            raise MissingInputError(f"cache file not found: {self.data_path}")
        idx = index_path_for(self.data_path)
        if not idx.is_file():
            raise MissingInputError(f"cache index not found: {idx}")
        lines = idx.read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != INDEX_HEADER:
            raise FormatError(f"{idx}: missing index header {INDEX_HEADER!r}")
        self._offsets: dict[str, int] = {}
        for n, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{idx}:{n}: expected 'id<TAB>offset'")
            self._offsets[parts[0]] = int(parts[1])
        self._data = self.data_path.read_bytes()

    def __contains__(self, sample_id: str) -> bool:
        return sample_id in self._offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def ids(self) -> tuple[str, ...]:
        return tuple(self._offsets)

    def get(self, sample_id: str) -> np.ndarray:
        if sample_id not in self._offsets:
            raise MissingInputError(f"cache miss for id {sample_id!r}")
        off = self._offsets[sample_id]
        magic, h, w, c = struct.unpack_from(HEADER_FORMAT, self._data, off)
        if magic != BLOB_MAGIC:
            raise FormatError(f"bad blob magic at offset {off} for id {sample_id!r}")
        count = h * w * c
        start = off + HEADER_SIZE
        payload = np.frombuffer(self._data, dtype="<f4", count=count, offset=start)
        return payload.reshape(h, w, c).copy()


def write_skip_log(skips: dict[str, str], path: Path | str) -> None:
    lines = [SKIPLOG_HEADER]
    lines.extend(f"{sid}\t{reason}" for sid, reason in skips.items())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_skip_log(path: Path | str) -> dict[str, str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != SKIPLOG_HEADER:
        raise FormatError(f"{path}: missing skip-log header {SKIPLOG_HEADER!r}")
    skips = {}
    for line in lines[1:]:
        if line:
            sid, _, reason = line.partition("\t")
            skips[sid] = reason
    return skips
