"""Preprocessed-tensor cache: binary blob layout, index sidecar, skip log."""

from __future__ import annotations

import struct

import numpy as np
import pytest

from ethnipipe.cache import (
    BLOB_MAGIC,
    HEADER_SIZE,
    CacheWriter,
    PreprocessedCache,
    index_path_for,
    read_skip_log,
    write_skip_log,
)
from ethnipipe.errors import FormatError, MissingInputError


@pytest.fixture()
def tensors(rng):
    return {
        "a": rng.random((80, 80, 3), dtype=np.float32),
        "b": rng.random((80, 80, 3), dtype=np.float32),
        "odd": rng.random((4, 6, 2), dtype=np.float32),
    }


@pytest.fixture()
def cache_path(tmp_path, tensors):
    path = tmp_path / "cache.bin"
    with CacheWriter(path) as writer:
        for sid, tensor in tensors.items():
            writer.add(sid, tensor)
    return path


def test_round_trip_is_exact(cache_path, tensors):
    cache = PreprocessedCache(cache_path)
    assert len(cache) == 3
    assert cache.ids() == ("a", "b", "odd")
    for sid, tensor in tensors.items():
        assert sid in cache
        got = cache.get(sid)
        assert got.dtype == np.float32
        assert np.array_equal(got, tensor)


def test_blob_layout(cache_path):
    blob = cache_path.read_bytes()
    magic, h, w, c = struct.unpack_from("<4sHHH6x", blob, 0)
    assert magic == BLOB_MAGIC and (h, w, c) == (80, 80, 3)
    assert HEADER_SIZE == 16
    # An 80x80x3 record is a 16-byte header plus 19200 4-byte samples.
    assert blob[: HEADER_SIZE + 4 * 19200]
    index = index_path_for(cache_path).read_text().splitlines()
    assert index[0] == "#ethnipipe-cache-index v1"
    assert index[1] == "a\t0"
    assert index[2] == f"b\t{HEADER_SIZE + 4 * 19200}"


def test_miss_names_the_id(cache_path):
    cache = PreprocessedCache(cache_path)
    with pytest.raises(MissingInputError, match="'ghost'"):
        cache.get("ghost")


def test_duplicate_ids_rejected(tmp_path, tensors):
    with CacheWriter(tmp_path / "c.bin") as writer:
        writer.add("a", tensors["a"])
        with pytest.raises(ValueError, match="duplicate"):
            writer.add("a", tensors["a"])


def test_id_may_not_contain_tabs(tmp_path, tensors):
    with CacheWriter(tmp_path / "c.bin") as writer:
        with pytest.raises(ValueError, match="tabs"):
            writer.add("a\tb", tensors["a"])


def test_tensor_must_be_3d(tmp_path):
    with CacheWriter(tmp_path / "c.bin") as writer:
        with pytest.raises(ValueError, match="\\(H, W, C\\)"):
            writer.add("flat", np.zeros((80, 80), dtype=np.float32))


def test_corrupt_magic_detected(cache_path):
    raw = bytearray(cache_path.read_bytes())
    raw[:4] = b"XXXX"
    cache_path.write_bytes(bytes(raw))
    cache = PreprocessedCache(cache_path)
    with pytest.raises(FormatError, match="magic"):
        cache.get("a")


def test_missing_files(tmp_path, cache_path):
    with pytest.raises(MissingInputError, match="cache file"):
        PreprocessedCache(tmp_path / "nope.bin")
    index_path_for(cache_path).unlink()
    with pytest.raises(MissingInputError, match="index"):
        PreprocessedCache(cache_path)


def test_index_header_enforced(cache_path):
    idx = index_path_for(cache_path)
    idx.write_text("a\t0\n")
    with pytest.raises(FormatError, match="header"):
        PreprocessedCache(cache_path)


def test_skip_log_round_trip(tmp_path):
    skips = {"img-1": "no face detected", "img-9": "no detector configured"}
    path = tmp_path / "skips.tsv"
    write_skip_log(skips, path)
    assert read_skip_log(path) == skips
    assert path.read_text().splitlines()[0] == "#ethnipipe-skiplog v1"
