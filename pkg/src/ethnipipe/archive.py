"""Named-tensor weight archives and model checkpoints.

Archive file layout (little-endian throughout):

    magic   b"EPWA"
    version u16
    records, each:
        key length  u16
        key bytes   (ascii)
        rank        u8
        dims        u32 x rank
        payload     f32 x prod(dims)
    crc32   u32 over everything before it

Backbone weights use the key scheme ``convK_J.kernel`` (3, 3, Cin, Cout)
and ``convK_J.bias`` (Cout,); head parameters are ``head.fc1.weight``,
``head.fc1.bias``, ``head.fc2.weight``, ``head.fc2.bias``.

A checkpoint is the same container with three kinds of reserved keys added:
``norm.mean`` / ``norm.std`` (the per-channel input standardization) and
``meta.arch`` / ``meta.plan`` / ``meta.digest`` (enough structure to rebuild
the architecture and verify it against the stored digest).
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model
from .errors import FormatError, MissingInputError

ARCHIVE_MAGIC = b"EPWA"
ARCHIVE_VERSION = 1

_RESERVED_KEYS = ("norm.mean", "norm.std", "meta.arch", "meta.plan", "meta.digest")

# torchvision VGG-16 stores conv layers at these feature-module indices.
_TORCHVISION_FEATURE_INDICES = (0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28)
_BACKBONE_LAYER_NAMES = tuple(
    name for name, _, _ in model.VGG16_CONV_PLAN if not name.startswith("pool")
)
# tf-Keras VGG-16 names the same layers blockK_convJ.
_KERAS_LAYER_NAMES = tuple(
    f"block{name[4]}_conv{name[6]}" for name in _BACKBONE_LAYER_NAMES
)


@dataclass
class WeightArchive:
    """An ordered name -> float32 tensor map with a source tag.

    The tag describes where the weights came from (e.g. the converted file);
    it lives in memory only — the file grammar carries tensors exclusively.
    """

    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    source: str = ""

    def __post_init__(self) -> None:
        clean: dict[str, np.ndarray] = {}
        for key, value in self.tensors.items():
            _check_key(key)
            if key in clean:
                raise FormatError(f"duplicate archive key {key!r}")
            clean[key] = np.ascontiguousarray(value, dtype=np.float32)
        self.tensors = clean

    def __contains__(self, key: str) -> bool:
        return key in self.tensors

    def __getitem__(self, key: str) -> np.ndarray:
        if key not in self.tensors:
            raise MissingInputError(f"archive has no tensor {key!r}")
        return self.tensors[key]

    def keys(self):
        return self.tensors.keys()


def _check_key(key: str) -> None:
    if not key:
        raise FormatError("archive keys may not be empty")
    try:
        raw = key.encode("ascii")
    except UnicodeEncodeError:
        raise FormatError(f"archive key is not ascii: {key!r}") from None
    if len(raw) > 0xFFFF:
        raise FormatError(f"archive key too long ({len(raw)} bytes)")
    if any(b < 0x21 for b in raw):
        raise FormatError(f"archive key contains whitespace/control bytes: {key!r}")


def write_archive(archive: WeightArchive, path: Path | str) -> None:
    chunks = [ARCHIVE_MAGIC, struct.pack("<H", ARCHIVE_VERSION)]
    for key, tensor in archive.tensors.items():
        if tensor.ndim > 255:
            raise FormatError(f"tensor {key!r} has rank {tensor.ndim} > 255")
        raw = key.encode("ascii")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        chunks.append(tensor.astype("<f4", copy=False).tobytes())
    body = b"".join(chunks)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_archive(path: Path | str) -> WeightArchive:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"weight archive not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 10:
        raise FormatError(f"{path}: truncated archive ({len(blob)} bytes)")
    if blob[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {ARCHIVE_MAGIC!r}")
    body, (stored_crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    actual_crc = zlib.crc32(body)
    if stored_crc != actual_crc:
        raise FormatError(f"{path}: checksum mismatch (stored {stored_crc:#010x}, "
                          f"computed {actual_crc:#010x})")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != ARCHIVE_VERSION:
        raise FormatError(f"{path}: unsupported archive version {version}")

    tensors: dict[str, np.ndarray] = {}
    pos = 6
    while pos < len(body):
        if pos + 2 > len(body):
            raise FormatError(f"{path}: truncated record header at byte {pos}")
        (key_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        key = body[pos : pos + key_len].decode("ascii")
        pos += key_len
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = 4 * count
        if pos + nbytes > len(body):
            raise FormatError(f"{path}: tensor {key!r} payload truncated")
        data = np.frombuffer(body, dtype="<f4", count=count, offset=pos)
        pos += nbytes
        if key in tensors:
            raise FormatError(f"{path}: duplicate tensor key {key!r}")
        tensors[key] = data.reshape(dims).copy()
    return WeightArchive(tensors=tensors, source=str(path))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _plan_rows(spec: model.ModelSpec) -> list[tuple[float, float, float]]:
    rows = []
    for layer in spec.layers:
        if layer.kind == "conv":
            rows.append((0.0, float(layer.in_channels), float(layer.out_channels)))
        elif layer.kind == "pool":
            rows.append((1.0, 0.0, 0.0))
    return rows


def _plan_from_rows(rows: np.ndarray) -> tuple[tuple[str, int, int], ...]:
    plan: list[tuple[str, int, int]] = []
    block, conv_in_block = 1, 0
    for code, a, b in rows.reshape(-1, 3):
        if int(code) == 0:
            conv_in_block += 1
            plan.append((f"conv{block}_{conv_in_block}", int(a), int(b)))
        elif int(code) == 1:
            plan.append((f"pool{block}", 0, 0))
            block += 1
            conv_in_block = 0
        else:
            raise FormatError(f"checkpoint layer plan has unknown row code {code}")
    return tuple(plan)


def save_checkpoint(state: model.ModelState, path: Path | str) -> None:
    """Serialize parameters plus normalization and architecture metadata."""
    spec = state.spec
    tensors: dict[str, np.ndarray] = dict(state.params)
    for key in _RESERVED_KEYS:
        if key in tensors:
            raise FormatError(f"parameter key {key!r} collides with a reserved checkpoint key")
    tensors["norm.mean"] = state.norm_mean
    tensors["norm.std"] = state.norm_std
    tensors["meta.arch"] = np.array(
        [*spec.input_shape, spec.num_classes, spec.head_width], dtype=np.float32
    )
    tensors["meta.plan"] = np.array(_plan_rows(spec), dtype=np.float32).reshape(-1)
    digest_bytes = bytes.fromhex(spec.digest())
    tensors["meta.digest"] = np.frombuffer(digest_bytes, dtype=np.uint8).astype(np.float32)
    write_archive(WeightArchive(tensors=tensors, source="checkpoint"), path)


def load_checkpoint(path: Path | str) -> model.ModelState:
    archive = read_archive(path)
    tensors = dict(archive.tensors)
    for key in _RESERVED_KEYS:
        if key not in tensors:
            raise FormatError(f"{path}: not a checkpoint — missing {key!r}")
    arch = tensors.pop("meta.arch")
    if arch.shape != (5,):
        raise FormatError(f"{path}: malformed meta.arch of shape {arch.shape}")
    h, w, c, num_classes, head_width = (int(v) for v in arch)
    plan = _plan_from_rows(tensors.pop("meta.plan"))
    spec = model.assemble_spec(plan, (h, w, c), head_width, num_classes)

    stored = tensors.pop("meta.digest")
    stored_hex = bytes(int(v) for v in stored).hex()
    if stored_hex != spec.digest():
        raise FormatError(f"{path}: architecture digest mismatch "
                          f"(stored {stored_hex[:12]}…, rebuilt {spec.digest()[:12]}…)")

    norm_mean = tensors.pop("norm.mean")
    norm_std = tensors.pop("norm.std")
    return model.ModelState(
        spec=spec, params=tensors, norm_mean=norm_mean, norm_std=norm_std
    )


# ---------------------------------------------------------------------------
# Converters for public pretrained VGG-16 releases
# ---------------------------------------------------------------------------


def _from_torchvision_npz(path: Path) -> WeightArchive:
    with np.load(path) as bundle:
        tensors: dict[str, np.ndarray] = {}
        for idx, name in zip(_TORCHVISION_FEATURE_INDICES, _BACKBONE_LAYER_NAMES):
            wkey, bkey = f"features.{idx}.weight", f"features.{idx}.bias"
            if wkey not in bundle or bkey not in bundle:
                raise FormatError(f"{path}: missing {wkey!r}/{bkey!r} for layer {name}")
            weight = bundle[wkey]
            if weight.ndim != 4 or weight.shape[2:] != (3, 3):
                raise FormatError(f"{path}: {wkey!r} has shape {weight.shape}, "
                                  "expected (out, in, 3, 3)")
            # (out, in, 3, 3) -> (3, 3, in, out)
            tensors[f"{name}.kernel"] = weight.transpose(2, 3, 1, 0)
            tensors[f"{name}.bias"] = bundle[bkey]
    return WeightArchive(tensors=tensors, source=str(path))


def _from_keras_h5(path: Path) -> WeightArchive:
    import h5py

    def find_dataset(group, needles: tuple[str, ...]):
        hits = []

        def visit(name, obj):
            if isinstance(obj, h5py.Dataset):
                leaf = name.rsplit("/", 1)[-1]
                if any(leaf.startswith(n) for n in needles):
                    hits.append(obj)

        group.visititems(visit)
        return hits[0] if hits else None

    tensors: dict[str, np.ndarray] = {}
    with h5py.File(path, "r") as f:
        root = f["model_weights"] if "model_weights" in f else f
        for keras_name, name in zip(_KERAS_LAYER_NAMES, _BACKBONE_LAYER_NAMES):
            if keras_name not in root:
                raise FormatError(f"{path}: missing layer group {keras_name!r}")
            group = root[keras_name]
            kernel = find_dataset(group, ("kernel", f"{keras_name}_W"))
            bias = find_dataset(group, ("bias", f"{keras_name}_b"))
            if kernel is None or bias is None:
                raise FormatError(f"{path}: layer {keras_name!r} lacks kernel/bias datasets")
            kernel = np.asarray(kernel)
            if kernel.shape[:2] != (3, 3):
                raise FormatError(f"{path}: {keras_name!r} kernel shaped {kernel.shape}, "
                                  "expected (3, 3, in, out)")
            tensors[f"{name}.kernel"] = kernel
            tensors[f"{name}.bias"] = np.asarray(bias)
    return WeightArchive(tensors=tensors, source=str(path))


def convert_weights(src: Path | str, out: Path | str) -> WeightArchive:
    """Convert a public pretrained VGG-16 release into our archive format.

    Supported containers: ``.npz`` with torchvision state-dict keys
    (``features.N.weight``/``.bias``, conv weights (out, in, 3, 3)),
    ``.h5``/``.hdf5`` with tf-Keras layer groups (``blockK_convJ``, kernels
    already (3, 3, in, out)), and ``.epwa`` (validated pass-through).
    """
    src = Path(src)
    if not src.is_file():
        raise MissingInputError(f"pretrained weight file not found: {src}")
    suffix = src.suffix.lower()
    if suffix == ".npz":
        archive = _from_torchvision_npz(src)
    elif suffix in (".h5", ".hdf5"):
        archive = _from_keras_h5(src)
    elif suffix == ".epwa":
        archive = read_archive(src)
        for name in _BACKBONE_LAYER_NAMES:
            for key in (f"{name}.kernel", f"{name}.bias"):
                if key not in archive:
                    raise FormatError(f"{src}: archive is missing backbone tensor {key!r}")
    else:
        raise FormatError(f"unsupported pretrained weight container {src.suffix!r} "
                          "(expected .npz, .h5/.hdf5, or .epwa)")
    write_archive(archive, out)
    return archive
