"""Shared data containers, error types and the MOBS binary image-stack format.

Images are flattened row-major (row index varies slowest) and stored as
float64 everywhere. A stack is an ``N x M`` matrix with one image per row
plus a 0/1 label per image (0 = signal absent, 1 = signal present).
"""

from __future__ import annotations

import csv
import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Union

import numpy as np

PathLike = Union[str, os.PathLike]

MOBS_MAGIC = b"MOBS"
MOBS_VERSION = 1
MOBS_DTYPE_FLOAT64 = 8
# magic | version | N | height | width | dtype | 4 reserved bytes  -> 32 bytes
_MOBS_HEADER = struct.Struct("<4sIQIII4x")
MOBS_HEADER_SIZE = _MOBS_HEADER.size


class ObserverError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ObserverError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(ObserverError):
    """A byte stream is not in the expected file format."""


class CorruptionError(FormatError):
    """A file has a valid header but an inconsistent or truncated payload."""


class InsufficientDataError(ValidationError):
    """Too few samples to estimate the requested statistic."""


class SingularMatrixError(ObserverError, np.linalg.LinAlgError):
    """Symmetric positive-definite factorization failed.

    ``index`` is the 1-based order of the leading minor that is not
    positive definite.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DegenerateChannelError(ObserverError):
    """A channel is (numerically) a linear combination of other channels."""

    def __init__(self, message: str, indices: tuple[int, ...] = ()):
        super().__init__(message)
        self.indices = tuple(indices)


class DegenerateTaskError(ObserverError):
    """The detection task carries no usable signal (e.g. zero mean difference)."""


class IngestionError(ObserverError):
    """An ROI directory or file could not be loaded."""


def _as_matrix(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImageStack:
    """A set of flattened images with hypothesis labels.

    Parameters
    ----------
    data : array_like, shape (N, height*width)
        One image per row, row-major flattened.
    labels : array_like of {0, 1}, shape (N,)
    height, width : int
    """

    data: np.ndarray
    labels: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        height, width = int(self.height), int(self.width)
        if height <= 0 or width <= 0:
            raise ValidationError(f"height and width must be positive, got {height}x{width}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, height * width)
        data = _as_matrix(data, "data")
        if data.shape[1] != height * width:
            raise ValidationError(
                f"rows have length {data.shape[1]}, expected height*width = {height * width}"
            )
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.shape[0] != data.shape[0]:
            raise ValidationError(
                f"labels must be a vector of length {data.shape[0]}, got shape {labels.shape}"
            )
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise ValidationError("labels must contain only 0 and 1")
        labels = labels.astype(np.uint8)
        labels.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "height", height)
        object.__setattr__(self, "width", width)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def m(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageStack):
            return NotImplemented
        return (
            self.height == other.height
            and self.width == other.width
            and np.array_equal(self.labels, other.labels)
            and self.data.shape == other.data.shape
            # bitwise comparison, so NaN payloads and signed zeros count
            and self.data.tobytes() == other.data.tobytes()
        )

    def class_rows(self, label: int) -> np.ndarray:
        return self.data[self.labels == label]

    def split_by_label(self) -> tuple["ImageStack", "ImageStack"]:
        """Return ``(absent, present)`` sub-stacks."""
        out = []
        for label in (0, 1):
            mask = self.labels == label
            out.append(ImageStack(self.data[mask], self.labels[mask], self.height, self.width))
        return out[0], out[1]

    def subset(self, index) -> "ImageStack":
        return ImageStack(self.data[index], self.labels[index], self.height, self.width)

    def with_labels(self, labels) -> "ImageStack":
        return ImageStack(self.data, labels, self.height, self.width)

    @classmethod
    def concatenate(cls, stacks) -> "ImageStack":
        stacks = list(stacks)
        if not stacks:
            raise ValidationError("nothing to concatenate")
        h, w = stacks[0].height, stacks[0].width
        for s in stacks[1:]:
            if (s.height, s.width) != (h, w):
                raise ValidationError(
                    f"cannot concatenate {s.height}x{s.width} stack onto {h}x{w}"
                )
        return cls(
            np.concatenate([s.data for s in stacks]),
            np.concatenate([s.labels for s in stacks]),
            h,
            w,
        )


@dataclass(frozen=True, eq=False)
class SignalImage:
    """A known signal image ``s`` (also the mean difference in SKE tasks)."""

    s: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        s = np.array(self.s, dtype=np.float64, copy=True).ravel()
        if s.size != int(self.height) * int(self.width):
            raise ValidationError(
                f"signal has {s.size} pixels, expected {self.height}x{self.width}"
            )
        s.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "width", int(self.width))

    @property
    def m(self) -> int:
        return self.s.size

    def image(self) -> np.ndarray:
        return self.s.reshape(self.height, self.width)


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """``D x M`` channel matrix; each row is one channel vector."""

    rows: np.ndarray

    def __post_init__(self):
        rows = _as_matrix(self.rows, "channel rows")
        d, m = rows.shape
        if d < 1 or d > m:
            raise ValidationError(f"need 1 <= D <= M, got D={d}, M={m}")
        zero = np.flatnonzero(~np.any(rows != 0.0, axis=1))
        if zero.size:
            raise DegenerateChannelError(
                f"channel rows {zero.tolist()} are identically zero", tuple(zero.tolist())
            )
        object.__setattr__(self, "rows", rows)

    @property
    def d(self) -> int:
        return self.rows.shape[0]

    @property
    def m(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.d

    def first(self, d: int) -> "ChannelMatrix":
        return ChannelMatrix(self.rows[:d])

    def normalized(self) -> "ChannelMatrix":
        """Rows scaled to unit L2 norm (for display; CHO decisions are unchanged)."""
        return ChannelMatrix(self.rows / np.linalg.norm(self.rows, axis=1, keepdims=True))

    def to_stack(self, height: int, width: int) -> ImageStack:
        return ImageStack(self.rows, np.zeros(self.d, dtype=np.uint8), height, width)


OBSERVER_KINDS = ("HO", "RHO", "CHO")


@dataclass(frozen=True, eq=False)
class ObserverTemplate:
    """A linear template ``w`` acting on image data."""

    w: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in OBSERVER_KINDS:
            raise ValidationError(f"kind must be one of {OBSERVER_KINDS}, got {self.kind!r}")
        w = np.array(self.w, dtype=np.float64, copy=True).ravel()
        if not np.all(np.isfinite(w)):
            raise ValidationError(f"{self.kind} template has non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def to_stack(self, height: int, width: int) -> ImageStack:
        return ImageStack(self.w[None, :], np.zeros(1, dtype=np.uint8), height, width)


# --------------------------------------------------------------------------
# MOBS format
# --------------------------------------------------------------------------


def write_image_stack(stack: ImageStack, destination: BinaryIO | PathLike) -> None:
    """Serialize ``stack`` in the MOBS format.

    Layout: 32-byte header, ``N*M`` little-endian float64 pixels (row-major),
    then ``N`` label bytes.
    """
    if stack.n == 0:
        raise ValidationError("empty stack: refusing to write a stack with N=0")
    if not hasattr(destination, "write"):
        with open(destination, "wb") as fh:
            write_image_stack(stack, fh)
        return
    header = _MOBS_HEADER.pack(
        MOBS_MAGIC, MOBS_VERSION, stack.n, stack.height, stack.width, MOBS_DTYPE_FLOAT64
    )
    destination.write(header)
    destination.write(np.ascontiguousarray(stack.data, dtype="<f8").tobytes())
    destination.write(stack.labels.astype(np.uint8).tobytes())


def _read_exact(source: BinaryIO, nbytes: int, what: str) -> bytes:
    buf = source.read(nbytes)
    if len(buf) != nbytes:
        raise CorruptionError(f"truncated MOBS {what}: expected {nbytes} bytes, got {len(buf)}")
    return buf


def read_image_stack(source: BinaryIO | PathLike) -> ImageStack:
    """Read a stack written by :func:`write_image_stack`."""
    if not hasattr(source, "read"):
        with open(source, "rb") as fh:
            return read_image_stack(fh)
    head = source.read(MOBS_HEADER_SIZE)
    if len(head) < 4 or head[:4] != MOBS_MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {MOBS_MAGIC!r}")
    if len(head) != MOBS_HEADER_SIZE:
        raise CorruptionError("truncated MOBS header")
    _, version, n, height, width, dtype = _MOBS_HEADER.unpack(head)
    if version != MOBS_VERSION:
        raise FormatError(f"unsupported MOBS version {version}")
    if dtype != MOBS_DTYPE_FLOAT64:
        raise FormatError(f"unsupported MOBS dtype tag {dtype}")
    if n == 0 or height == 0 or width == 0:
        raise CorruptionError(f"degenerate MOBS header: N={n}, {height}x{width}")
    m = height * width
    payload = _read_exact(source, n * m * 8, "payload")
    labels = np.frombuffer(_read_exact(source, n, "labels"), dtype=np.uint8)
    if np.any(labels > 1):
        bad = int(labels[labels > 1][0])
        raise ValidationError(f"label byte {bad} is not 0 or 1")
    data = np.frombuffer(payload, dtype="<f8").reshape(n, m)
    return ImageStack(data, labels, height, width)


def image_stack_to_bytes(stack: ImageStack) -> bytes:
    buf = io.BytesIO()
    write_image_stack(stack, buf)
    return buf.getvalue()


def write_rows_csv(rows: np.ndarray, path: PathLike) -> None:
    """One CSV line per row (channel or template), full float64 precision."""
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for r in rows:
            writer.writerow([repr(float(x)) for x in r])
