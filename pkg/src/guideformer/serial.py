"""Bit-exact binary formats for datasets and checkpoints.

Dataset file ("SGDS"):
    magic 4B | version u32 | count u32 | height u32 | width u32 |
    channels u32 | labels count x u8 | pixels count*h*w*c x f32,
    row-major, channel-last. All integers and floats little-endian.

Checkpoint file ("SGCK"):
    magic 4B | version u32 | step u64 | rng-state length u32 + raw bytes |
    tensor count u32 | per tensor: name length u16 + UTF-8 name |
    dtype u8 (0 = f32, 1 = f64) | rank u8 | dims rank x u64 | raw data LE.

Loading validates magic, version, and length; a wrong magic, an unsupported
version, and a short file each raise their own error type.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset

DATASET_MAGIC = b"SGDS"
CHECKPOINT_MAGIC = b"SGCK"
DATASET_VERSION = 1
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """A persisted file does not conform to its binary layout."""


class MagicError(FormatError):
    """The file does not start with the expected magic bytes."""


class VersionError(FormatError):
    """The file's format version is not supported by this reader."""


class TruncatedError(FormatError):
    """The file ends before its declared contents."""


class _Reader:
    def __init__(self, blob: bytes, kind: str):
        self.blob = blob
        self.pos = 0
        self.kind = kind

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedError(
                f"{self.kind} file ends at byte {len(self.blob)}, "
                f"needed {self.pos + n}"
            )
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def _check_header(r: _Reader, magic: bytes, version: int):
    got = r.take(4)
    if got != magic:
        raise MagicError(f"expected magic {magic!r}, found {got!r}")
    (v,) = r.unpack("I")
    if v != version:
        raise VersionError(f"unsupported {r.kind} version {v} (reader supports {version})")


def save_dataset(path, dataset: Dataset):
    images = np.ascontiguousarray(dataset.images, dtype="<f4")
    labels = np.ascontiguousarray(dataset.labels, dtype=np.uint8)
    n, h, w, c = images.shape
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<IIIII", DATASET_VERSION, n, h, w, c))
        f.write(labels.tobytes())
        f.write(images.tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        r = _Reader(f.read(), "dataset")
    _check_header(r, DATASET_MAGIC, DATASET_VERSION)
    n, h, w, c = r.unpack("IIII")
    labels = np.frombuffer(r.take(n), dtype=np.uint8).copy()
    pixels = np.frombuffer(r.take(n * h * w * c * 4), dtype="<f4")
    images = pixels.reshape(n, h, w, c).astype(np.float32)
    return Dataset(images=images, labels=labels, boxes=None)


@dataclass
class Checkpoint:
    """One training snapshot: every tensor by name, plus step and RNG state."""

    step: int
    rng_state: bytes
    tensors: dict[str, np.ndarray]
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path, checkpoint: Checkpoint):
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", CHECKPOINT_VERSION, checkpoint.step))
        f.write(struct.pack("<I", len(checkpoint.rng_state)))
        f.write(checkpoint.rng_state)
        f.write(struct.pack("<I", len(checkpoint.tensors)))
        for name, arr in checkpoint.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_CODES:
                raise FormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read(), "checkpoint")
    _check_header(r, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    (step,) = r.unpack("Q")
    (rng_len,) = r.unpack("I")
    rng_state = r.take(rng_len)
    (count,) = r.unpack("I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("H")
        name = r.take(name_len).decode("utf-8")
        code, rank = r.unpack("BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"{rank}Q") if rank else ()
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    return Checkpoint(step=step, rng_state=rng_state, tensors=tensors, version=CHECKPOINT_VERSION)


def write_pgm(path, values: np.ndarray):
    """8-bit binary PGM (P5, maxval 255), min-max normalized per image.

    A constant map writes as all zeros.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise FormatError(f"PGM needs a 2-d map, got shape {v.shape}")
    lo, hi = float(v.min()), float(v.max())
    scaled = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = v.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())
