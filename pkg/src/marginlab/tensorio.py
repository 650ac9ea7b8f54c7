"""Portable tensor files (.mpt) and dataset manifests.

File layout: magic ``4D 50 54 31`` ("MPT1"), u32 little-endian rank,
rank x u64 little-endian extents, then the row-major f64 little-endian
payload.  Everything downstream speaks float64 numpy arrays.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DataError,
    ExtentOverflowError,
    TruncatedPayloadError,
)

MAGIC = b"MPT1"

# Hard cap on total element count; anything larger is a corrupt header.
_MAX_ELEMENTS = 1 << 40


def write_tensor(t: np.ndarray, path: str | Path) -> None:
    """Write a float64 array to ``path`` in the portable format."""
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise DataError(f"refusing to write non-finite tensor to {path}")
    header = MAGIC + struct.pack("<I", t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t).astype("<f8").tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a portable tensor file; inverse of :func:`write_tensor`."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: missing tensor magic bytes")
    if len(raw) < 8:
        raise TruncatedPayloadError(f"{path}: header truncated")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if len(raw) < 8 + 8 * rank:
        raise TruncatedPayloadError(f"{path}: extent table truncated")
    shape = struct.unpack_from(f"<{rank}Q", raw, 8)
    count = 1
    for extent in shape:
        count *= extent
    if count > _MAX_ELEMENTS:
        raise ExtentOverflowError(f"{path}: {count} elements declared")
    offset = 8 + 8 * rank
    expected = offset + 8 * count
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(raw) - offset} bytes, expected {8 * count}"
        )
    data = np.frombuffer(raw[offset:expected], dtype="<f8")
    return data.reshape(shape).astype(np.float64)


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class DatasetSplit:
    """A normalized dataset split with its search-space bounds.

    ``inputs`` is (num_samples, num_features), already normalized with the
    recorded per-feature ``mean`` and ``std``.  ``lower``/``upper`` are the
    per-feature bounds of the margin search space (post-normalization).
    """

    inputs: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    num_classes: int

    @property
    def num_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_features(self) -> int:
        return self.inputs.shape[1]

    def validate(self) -> None:
        if self.inputs.ndim != 2:
            raise DataError("inputs must be (num_samples, num_features)")
        if self.labels.shape != (self.inputs.shape[0],):
            raise DataError("labels must align with inputs")
        if not np.all(np.isfinite(self.inputs)):
            raise DataError("non-finite inputs")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise DataError("labels outside [0, num_classes)")
        if not np.all(self.lower <= self.upper):
            raise DataError("lower bound exceeds upper bound")
        if self.inputs.size and (
            np.any(self.inputs < self.lower - 1e-9)
            or np.any(self.inputs > self.upper + 1e-9)
        ):
            raise DataError("inputs outside declared bounds")


def save_dataset(split: DatasetSplit, directory: str | Path, name: str) -> Path:
    """Persist a split as .mpt tensors plus a JSON manifest; returns manifest path."""
    split.validate()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "inputs": f"{name}_inputs.mpt",
        "labels": f"{name}_labels.mpt",
        "mean": f"{name}_mean.mpt",
        "std": f"{name}_std.mpt",
        "lower": f"{name}_lower.mpt",
        "upper": f"{name}_upper.mpt",
    }
    write_tensor(split.inputs, directory / files["inputs"])
    write_tensor(split.labels.astype(np.float64), directory / files["labels"])
    write_tensor(split.mean, directory / files["mean"])
    write_tensor(split.std, directory / files["std"])
    write_tensor(split.lower, directory / files["lower"])
    write_tensor(split.upper, directory / files["upper"])
    manifest = {"num_classes": split.num_classes, "tensors": files}
    manifest_path = directory / f"{name}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_dataset(manifest_path: str | Path) -> DatasetSplit:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    base = manifest_path.parent
    tensors = {key: read_tensor(base / rel) for key, rel in manifest["tensors"].items()}
    labels = tensors["labels"]
    if not np.all(labels == np.round(labels)):
        raise DataError("labels tensor holds non-integral values")
    split = DatasetSplit(
        inputs=tensors["inputs"],
        labels=labels.astype(np.int64),
        mean=tensors["mean"],
        std=tensors["std"],
        lower=tensors["lower"],
        upper=tensors["upper"],
        num_classes=int(manifest["num_classes"]),
    )
    split.validate()
    return split
