"""Datasets (MNIST IDX files, synthetic blobs) and the SFPK checkpoint format.

SFPK layout (all integers little-endian)::

    b"SFPK" | u32 version | u32 n | n bytes UTF-8 JSON header
    then per tensor: u32 name length | name | u8 dtype code | u8 ndim
                     | ndim x u32 dims | payload (little-endian IEEE-754)

The JSON header holds the architecture description, the input shape and the
training metadata.
"""
import gzip
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from stability_pruner.architectures import format_architecture, parse_architecture
from stability_pruner.errors import CheckpointError, ConfigError, DataError, IdxFormatError, PrunerError
from stability_pruner.model import ModelGraph, tensor_shapes
from stability_pruner.tensor import FLOAT32, FLOAT64, generator

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_COUNTS = {"train": 60000, "test": 10000}

CHECKPOINT_MAGIC = b"SFPK"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {FLOAT32: 1, FLOAT64: 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # (N, C, H, W) in [0, 1]
    labels: np.ndarray          # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        for arr in (self.images, self.labels):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, count: int, seed: Optional[int] = None) -> "Dataset":
        """First ``count`` samples, or a seeded random subset."""
        if seed is None:
            idx = np.arange(min(count, len(self)))
        else:
            idx = np.sort(generator(seed).permutation(len(self))[:count])
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes)


def _read_bytes(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _find(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz",
                      directory / stem.replace("-idx", ".idx")):
        if candidate.is_file():
            return candidate
    raise DataError(f"missing MNIST file {directory / stem}")


def read_idx_images(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise IdxFormatError(path, len(raw), "truncated header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(path, 0, f"bad magic {magic}, expected {IMAGE_MAGIC}")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise IdxFormatError(path, min(len(raw), expected),
                             f"file has {len(raw)} bytes, header implies {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    return pixels.astype(np.float32) / np.float32(255.0)


def read_idx_labels(path: Path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise IdxFormatError(path, len(raw), "truncated header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(path, 0, f"bad magic {magic}, expected {LABEL_MAGIC}")
    if len(raw) != 8 + count:
        raise IdxFormatError(path, min(len(raw), 8 + count),
                             f"file has {len(raw)} bytes, header implies {8 + count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist_split(directory: PathLike, split: str,
                     expected_count: Optional[int] = None) -> Dataset:
    directory = Path(directory)
    image_stem, label_stem = MNIST_FILES[split]
    images_path, labels_path = _find(directory, image_stem), _find(directory, label_stem)
    images, labels = read_idx_images(images_path), read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise DataError(f"{images_path} holds {len(images)} images but {labels_path} holds {len(labels)} labels")
    if expected_count is not None and len(images) != expected_count:
        raise DataError(f"{images_path}: expected {expected_count} samples, found {len(images)}")
    logger.info("📥 %s: %d %s samples", directory, len(images), split)
    return Dataset(images, labels, split, 10)


def load_mnist(directory: PathLike, strict: bool = True) -> Tuple[Dataset, Dataset]:
    """(train, test) from the four IDX files (raw or .gz) in ``directory``.

    ``strict`` also checks the published 60,000 / 10,000 sample counts.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"MNIST directory not found: {directory}")
    return tuple(load_mnist_split(directory, split, MNIST_COUNTS[split] if strict else None)
                 for split in ("train", "test"))


def synth_dataset(n: int, classes: int = 10, seed: int = 0, image_size: int = 12,
                  noise: float = 0.1, split: str = "train") -> Dataset:
    """Separable Gaussian blobs: class c is a bright spot at its own grid cell.

    The class centres depend only on (classes, image_size); ``seed`` drives
    label order, centre jitter and pixel noise.
    """
    if classes < 2 or n < classes or image_size < 6 or noise < 0:
        raise ConfigError(f"invalid synthetic dataset sizes n={n} classes={classes} image_size={image_size}")
    rng = generator(seed)
    grid = int(np.ceil(np.sqrt(classes)))
    cell = image_size / grid
    centres = [((c // grid + 0.5) * cell, (c % grid + 0.5) * cell) for c in range(classes)]
    labels = rng.permutation(np.arange(n) % classes)
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    sigma = max(cell / 3.0, 0.75)
    jitter = rng.uniform(-cell / 6, cell / 6, size=(n, 2))
    cy = np.array([centres[c][0] for c in labels]) + jitter[:, 0]
    cx = np.array([centres[c][1] for c in labels]) + jitter[:, 1]
    blobs = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2) / (2 * sigma ** 2))
    images = np.clip(blobs + rng.normal(0.0, noise, size=blobs.shape), 0.0, 1.0)
    return Dataset(images[:, None].astype(np.float32), labels.astype(np.int64), split, classes)


def load_dataset(spec: str, split_seed: int = 0) -> Tuple[Dataset, Dataset]:
    """``synth[:n=...,classes=...,size=...]`` or an MNIST directory."""
    if spec.startswith("synth"):
        options = {"n": "2000", "classes": "10", "size": "12", "seed": str(split_seed)}
        _, _, rest = spec.partition(":")
        for token in filter(None, rest.split(",")):
            key, _, value = token.partition("=")
            if key not in options:
                raise ConfigError(f"unknown synthetic dataset option {key!r}")
            options[key] = value
        try:
            n, classes, size, seed = (int(options[k]) for k in ("n", "classes", "size", "seed"))
        except ValueError:
            raise ConfigError(f"bad synthetic dataset spec {spec!r}") from None
        train = synth_dataset(n, classes, seed, size, split="train")
        test = synth_dataset(max(classes, n // 5), classes, seed + 1, size, split="test")
        return train, test
    return load_mnist(spec)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: ModelGraph
    metadata: Dict = field(default_factory=dict)


def _header(model: ModelGraph, metadata: Dict) -> bytes:
    doc = {
        "name": model.architecture.name,
        "architecture": format_architecture(model.architecture),
        "dtype": model.dtype.name,
        "metadata": metadata,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(model: ModelGraph, metadata: Optional[Dict] = None) -> bytes:
    header = _header(model, metadata or {})
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    for name, value in model.tensors():
        encoded = name.encode("utf-8")
        dtype = np.dtype(value.dtype)
        if dtype not in DTYPE_CODES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {dtype}")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", DTYPE_CODES[dtype], value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype=dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, source: str):
        self.raw, self.pos, self.source = raw, 0, source

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.raw):
            raise CheckpointError(f"{self.source}: truncated while reading {what} at offset {self.pos}")
        chunk = self.raw[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def decode_checkpoint(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(raw, source)
    magic = reader.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, header_len = reader.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")
    try:
        doc = json.loads(reader.take(header_len, "architecture block").decode("utf-8"))
        arch = parse_architecture(doc["architecture"], name=doc.get("name", "custom"))
        dtype = np.dtype(doc["dtype"])
    except (ValueError, KeyError, TypeError, PrunerError) as exc:
        raise CheckpointError(f"{source}: malformed architecture block: {exc}") from exc

    tensors: Dict[str, np.ndarray] = {}
    while not reader.done:
        (name_len,) = reader.unpack("<I", "tensor name length")
        offset = reader.pos
        try:
            name = reader.take(name_len, "tensor name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{source}: undecodable tensor name at offset {offset}: {exc}") from exc
        code, ndim = reader.unpack("<BB", f"{name} dtype")
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{source}: tensor {name} has unknown dtype code {code}")
        dims = reader.unpack(f"<{ndim}I", f"{name} dims")
        t_dtype = CODE_DTYPES[code]
        offset = reader.pos
        payload = reader.take(int(np.prod(dims)) * t_dtype.itemsize, f"{name} payload")
        try:
            tensors[name] = np.frombuffer(payload, dtype=t_dtype.newbyteorder("<")).astype(t_dtype).reshape(dims)
        except ValueError as exc:
            raise CheckpointError(f"{source}: tensor {name} payload at offset {offset}: {exc}") from exc

    param_shapes, buffer_shapes = tensor_shapes(arch)
    params = {k: tensors.pop(k) for k in param_shapes if k in tensors}
    buffers = {k: tensors.pop(k) for k in buffer_shapes if k in tensors}
    if tensors:
        raise CheckpointError(f"{source}: unexpected tensors {sorted(tensors)}")
    try:
        model = ModelGraph(arch, params, buffers, dtype)
    except PrunerError as exc:
        raise CheckpointError(f"{source}: tensors do not match the architecture: {exc}") from exc
    return Checkpoint(model, doc.get("metadata", {}))


def save_checkpoint(model: ModelGraph, path: PathLike, metadata: Optional[Dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model, metadata))
    tmp.replace(path)
    logger.info("📦 saved checkpoint %s (%d params)", path, model.parameter_count())
    return path


def load_checkpoint(path: PathLike) -> ModelGraph:
    return read_checkpoint(path).model


def read_checkpoint(path: PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
