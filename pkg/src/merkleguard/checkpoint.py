"""NTCK checkpoint format, in-memory model types and MNIST IDX ingestion.

NTCK layout (all integers little-endian)::

    b"NTCK" | u16 version (=1) | u32 layer_count
    per layer: u32 in_dim | u32 out_dim
               | out_dim*in_dim binary32 weights (row-major, row = neuron)
               | out_dim binary32 biases
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"NTCK"
VERSION = 1

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_PIXELS = 28 * 28

_F32_LE = np.dtype("<f4")


class CheckpointFormatError(ValueError):
    """Base class for malformed NTCK files."""


class BadMagicError(CheckpointFormatError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class TruncatedCheckpointError(CheckpointFormatError):
    pass


class ShapeChainError(CheckpointFormatError):
    """Layer dimensions are inconsistent (or there are no layers)."""


class IdxFormatError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """One fully connected layer; ``weights[i]`` is the incoming row of neuron ``i``."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float32, copy=True)
        b = np.array(self.biases, dtype=np.float32, copy=True)
        if w.ndim != 2 or w.shape[0] == 0 or w.shape[1] == 0:
            raise ShapeChainError(f"weights must be a non-empty 2-D matrix, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ShapeChainError(
                f"biases shape {b.shape} does not match out_dim {w.shape[0]}"
            )
        object.__setattr__(self, "weights", _frozen(np.ascontiguousarray(w)))
        object.__setattr__(self, "biases", _frozen(b))

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.biases).all())

    def __eq__(self, other: object) -> bool:
        # Bitwise comparison so that NaN payloads and signed zeros count.
        if not isinstance(other, DenseLayer):
            return NotImplemented
        return (
            self.weights.shape == other.weights.shape
            and self.weights.tobytes() == other.weights.tobytes()
            and self.biases.tobytes() == other.biases.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """An ordered stack of dense layers (an MLP)."""

    layers: tuple[DenseLayer, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ShapeChainError("a checkpoint needs at least one layer")
        for i, (a, b) in enumerate(zip(layers, layers[1:])):
            if a.out_dim != b.in_dim:
                raise ShapeChainError(
                    f"layer {i} out_dim {a.out_dim} != layer {i + 1} in_dim {b.in_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @classmethod
    def from_arrays(cls, params: Iterable[tuple[np.ndarray, np.ndarray]]) -> "Checkpoint":
        return cls(tuple(DenseLayer(w, b) for w, b in params))

    @property
    def shape(self) -> list[tuple[int, int]]:
        return [(layer.in_dim, layer.out_dim) for layer in self.layers]

    @property
    def num_parameters(self) -> int:
        return sum(l.weights.size + l.biases.size for l in self.layers)

    def with_bias(self, layer: int, unit: int, value: np.float32) -> "Checkpoint":
        """Copy of the model with a single bias replaced."""
        layers = list(self.layers)
        target = layers[layer]
        biases = target.biases.copy()
        biases[unit] = value
        layers[layer] = DenseLayer(target.weights, biases)
        return Checkpoint(tuple(layers))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return len(self.layers) == len(other.layers) and all(
            a == b for a, b in zip(self.layers, other.layers)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self) -> None:
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels)
        if images.ndim != 2:
            raise ValueError(f"images must be 2-D, got shape {images.shape}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise ValueError(
                f"{images.shape[0]} images but labels have shape {labels.shape}"
            )
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        object.__setattr__(self, "images", _frozen(np.array(images, copy=True)))
        object.__setattr__(self, "labels", _frozen(labels.astype(np.int64)))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, index: Sequence[int] | slice | np.ndarray) -> "Dataset":
        return Dataset(self.images[index], self.labels[index], self.num_classes)


# --------------------------------------------------------------------------- NTCK


def encode_checkpoint(model: Checkpoint) -> bytes:
    for i, layer in enumerate(model.layers):
        if not layer.is_finite():
            raise ValueError(f"layer {i} contains non-finite parameters; refusing to save")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(model.layers))]
    for layer in model.layers:
        parts.append(struct.pack("<II", layer.in_dim, layer.out_dim))
        parts.append(layer.weights.astype(_F32_LE, copy=False).tobytes(order="C"))
        parts.append(layer.biases.astype(_F32_LE, copy=False).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedCheckpointError(
                f"file ends at byte {len(view)} while reading {what} (need {pos + n})"
            )
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if len(view) >= 4 and bytes(view[:4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(view[:4])!r}, expected {MAGIC!r}")
    take(4, "magic")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported NTCK version {version}")
    (count,) = struct.unpack("<I", take(4, "layer count"))
    if count == 0:
        raise ShapeChainError("checkpoint declares zero layers")

    layers = []
    prev_out = None
    for i in range(count):
        in_dim, out_dim = struct.unpack("<II", take(8, f"layer {i} header"))
        if in_dim == 0 or out_dim == 0:
            raise ShapeChainError(f"layer {i} has a zero dimension ({in_dim}x{out_dim})")
        if prev_out is not None and prev_out != in_dim:
            raise ShapeChainError(
                f"layer {i} in_dim {in_dim} != previous out_dim {prev_out}"
            )
        w = np.frombuffer(take(4 * in_dim * out_dim, f"layer {i} weights"), dtype=_F32_LE)
        b = np.frombuffer(take(4 * out_dim, f"layer {i} biases"), dtype=_F32_LE)
        layers.append(DenseLayer(w.reshape(out_dim, in_dim), b))
        prev_out = out_dim
    if pos != len(view):
        raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after last layer")
    return Checkpoint(tuple(layers))


def save_checkpoint(model: Checkpoint, path: str | Path) -> None:
    data = encode_checkpoint(model)
    Path(path).write_bytes(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------------- IDX


def _idx_header(data: bytes, magic: int, ndims: int, path: Path) -> tuple[int, ...]:
    need = 4 + 4 * ndims
    if len(data) < need:
        raise IdxFormatError(f"{path}: truncated header ({len(data)} bytes)")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise IdxFormatError(f"{path}: wrong magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{ndims}I", data[4:need])


def load_idx_images(path: str | Path) -> np.ndarray:
    """Read an uncompressed IDX3 image file into an ``N x 784`` float32 matrix in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    count, rows, cols = _idx_header(data, IDX_IMAGES_MAGIC, 3, path)
    if rows * cols != IMAGE_PIXELS:
        raise IdxFormatError(f"{path}: images are {rows}x{cols}, expected 28x28")
    payload = data[16:]
    expected = count * IMAGE_PIXELS
    if len(payload) < expected:
        raise IdxFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise IdxFormatError(f"{path}: {len(payload) - expected} bytes beyond declared count")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, IMAGE_PIXELS)
    return pixels.astype(np.float32) / np.float32(255.0)


def load_idx_labels(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    (count,) = _idx_header(data, IDX_LABELS_MAGIC, 1, path)
    payload = data[8:]
    if len(payload) != count:
        kind = "truncated payload" if len(payload) < count else "extra bytes"
        raise IdxFormatError(f"{path}: {kind} ({len(payload)} bytes for {count} labels)")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


# Both the original distribution names and the dotted variant seen in some mirrors.
_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx(directory: Path, stem: str) -> Path:
    candidates = [stem, stem.replace("-idx", ".idx")]
    for name in candidates:
        if (directory / name).is_file():
            return directory / name
    raise FileNotFoundError(f"no {stem} (or {candidates[1]}) in {directory}")


def load_mnist_split(directory: str | Path, split: str) -> Dataset:
    """Load the ``train`` or ``test`` split from a directory of uncompressed IDX files."""
    directory = Path(directory)
    image_stem, label_stem = _SPLIT_FILES[split]
    images = load_idx_images(_find_idx(directory, image_stem))
    labels = load_idx_labels(_find_idx(directory, label_stem))
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{split}: {images.shape[0]} images but {labels.shape[0]} labels"
        )
    return Dataset(images, labels)
