"""Reader and writer for the IDX image/label format (big-endian headers)."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import DataError, IdxDimensionError, IdxHeaderError, IdxTruncatedError, ParameterError

IMAGES_MAGIC = 2051  # 0x00000803: unsigned bytes, 3 dimensions
LABELS_MAGIC = 2049  # 0x00000801: unsigned bytes, 1 dimension


@dataclass(frozen=True, eq=False)
class IdxDataset:
    images: np.ndarray      # (n, rows, cols) uint8
    labels: np.ndarray      # (n,) uint8, or int +-1 after a pair filter
    classes: tuple | None = None

    def __len__(self):
        return self.labels.shape[0]

    @property
    def X(self) -> np.ndarray:
        """Flattened images scaled to [0, 1]."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 255.0


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as fh:
            return fh.read()
    except (OSError, EOFError) as e:
        raise DataError(f"cannot read IDX file {path}: {e}") from e


def _parse(blob: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    head = 4 + 4 * ndim
    if len(blob) < 4:
        raise IdxTruncatedError(f"{what} file is shorter than its magic number")
    (got,) = struct.unpack(">i", blob[:4])
    if got != magic:
        raise IdxHeaderError(f"{what} file has magic {got}, expected {magic}")
    if len(blob) < head:
        raise IdxTruncatedError(f"{what} file header is truncated")
    dims = struct.unpack(">" + "i" * ndim, blob[4:head])
    if any(d < 0 for d in dims):
        raise IdxHeaderError(f"{what} file declares negative dimensions {dims}")
    need = int(np.prod(dims, dtype=np.int64))
    if len(blob) - head < need:
        raise IdxTruncatedError(f"{what} file holds {len(blob) - head} data bytes, header declares {need}")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=head).reshape(dims).copy()


def load_idx(images_path, labels_path, filter_classes=None) -> IdxDataset:
    """Load an image/label file pair.

    ``filter_classes=(a, b)`` keeps only those two digits, in file order,
    and relabels ``a`` as +1 and ``b`` as -1.
    """
    images = _parse(_read_bytes(images_path), IMAGES_MAGIC, 3, "image")
    labels = _parse(_read_bytes(labels_path), LABELS_MAGIC, 1, "label")
    if images.shape[0] != labels.shape[0]:
        raise IdxDimensionError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if filter_classes is None:
        return IdxDataset(images, labels)
    cls = tuple(int(c) for c in filter_classes)
    if len(cls) != 2 or cls[0] == cls[1]:
        raise ParameterError("filter_classes must name two distinct classes")
    keep = np.isin(labels, cls)
    y = np.where(labels[keep] == cls[0], 1, -1).astype(np.int64)
    return IdxDataset(images[keep], y, cls)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array of rank 1 (labels) or 3 (images)."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ParameterError("IDX writer expects uint8 data")
    if a.ndim == 1:
        magic = LABELS_MAGIC
    elif a.ndim == 3:
        magic = IMAGES_MAGIC
    else:
        raise ParameterError("IDX writer supports 1-D labels or 3-D images")
    blob = struct.pack(">i", magic) + struct.pack(">" + "i" * a.ndim, *a.shape) + a.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
