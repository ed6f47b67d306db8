"""Synthetic SKE detection data: MVN lumpy backgrounds, Gaussian signals, noise.

The lumpy background is a stationary Gaussian random field obtained by
circularly convolving white noise with a Gaussian kernel. Its covariance is
known in closed form (see :func:`mvn_lumpy_covariance`), which is what makes
exact-statistics oracle tests possible.
"""

from __future__ import annotations

import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    FormatError,
    ImageStack,
    IngestionError,
    SignalImage,
    ValidationError,
    read_image_stack,
)

log = logging.getLogger(__name__)

# images are generated in blocks so peak memory stays bounded; the rng
# stream is consumed in the same order regardless of block size
_BLOCK = 1024


@dataclass(frozen=True)
class MvnLumpyConfig:
    height: int = 64
    width: int = 64
    dc_offset: float = 100.0
    kernel_sigma: float = 5.0
    field_magnitude: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValidationError(f"image size must be positive, got {self.height}x{self.width}")
        if not self.kernel_sigma > 0:
            raise ValidationError(f"kernel_sigma must be > 0, got {self.kernel_sigma}")
        if self.field_magnitude < 0:
            raise ValidationError(f"field_magnitude must be >= 0, got {self.field_magnitude}")
        if min(self.height, self.width) < 4 * self.kernel_sigma:
            warnings.warn(
                f"{self.height}x{self.width} image is small relative to kernel_sigma="
                f"{self.kernel_sigma}; lumps will wrap around the periodic boundary",
                stacklevel=3,
            )


@dataclass(frozen=True)
class GaussianSignalConfig:
    center_row: float = 32.0
    center_col: float = 32.0
    sigma: float = 3.0
    amplitude: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"signal sigma must be > 0, got {self.sigma}")
        if self.amplitude == 0:
            raise ValidationError("signal amplitude must be nonzero")


@dataclass(frozen=True)
class NoiseConfig:
    sigma_n: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_n < 0:
            raise ValidationError(f"sigma_n must be >= 0, got {self.sigma_n}")


def _wrapped_offsets(n: int) -> np.ndarray:
    """Signed circular distance of each index from 0: 0, 1, ..., -2, -1."""
    k = np.arange(n)
    return np.where(k <= n // 2, k, k - n).astype(np.float64)


def lumpy_kernel(config: MvnLumpyConfig) -> np.ndarray:
    """Gaussian kernel centred at pixel (0, 0) on the periodic grid, unit L2 norm."""
    dr = _wrapped_offsets(config.height)[:, None]
    dc = _wrapped_offsets(config.width)[None, :]
    k = np.exp(-(dr**2 + dc**2) / (2.0 * config.kernel_sigma**2))
    return k / np.sqrt(np.sum(k**2))


def mvn_lumpy_autocovariance(config: MvnLumpyConfig) -> np.ndarray:
    """Exact circular autocovariance ``C(dr, dc)`` of the lumpy field (H x W).

    ``C = magnitude^2 * (k circularly correlated with k)``; ``C[0, 0]`` equals
    ``magnitude^2`` because the kernel has unit norm.
    """
    k = lumpy_kernel(config)
    power = np.abs(np.fft.rfft2(k)) ** 2
    acov = np.fft.irfft2(power, s=k.shape)
    return config.field_magnitude**2 * acov


def mvn_lumpy_covariance(config: MvnLumpyConfig) -> np.ndarray:
    """Dense ``M x M`` population covariance of the (noiseless) background."""
    acov = mvn_lumpy_autocovariance(config)
    h, w = config.height, config.width
    r = np.repeat(np.arange(h), w)
    c = np.tile(np.arange(w), h)
    cov = acov[(r[:, None] - r[None, :]) % h, (c[:, None] - c[None, :]) % w]
    # the circulant is symmetric in exact arithmetic; remove FFT round-off
    return 0.5 * (cov + cov.T)


def generate_mvn_lumpy(config: MvnLumpyConfig, count: int) -> ImageStack:
    """Draw ``count`` noiseless MVN lumpy backgrounds (labels all 0)."""
    if count < 1:
        raise ValidationError(f"count must be a positive integer, got {count}")
    h, w = config.height, config.width
    out = np.empty((count, h * w))
    rng = np.random.default_rng(config.seed)
    if config.field_magnitude == 0:
        out.fill(config.dc_offset)
        return ImageStack(out, np.zeros(count, dtype=np.uint8), h, w)
    kernel_ft = np.fft.rfft2(lumpy_kernel(config))
    for start in range(0, count, _BLOCK):
        stop = min(start + _BLOCK, count)
        white = rng.standard_normal((stop - start, h, w))
        field = np.fft.irfft2(np.fft.rfft2(white) * kernel_ft, s=(h, w))
        out[start:stop] = config.dc_offset + config.field_magnitude * field.reshape(stop - start, -1)
    return ImageStack(out, np.zeros(count, dtype=np.uint8), h, w)


def render_gaussian_signal(config: GaussianSignalConfig, height: int, width: int) -> SignalImage:
    if not (0 <= config.center_row <= height - 1 and 0 <= config.center_col <= width - 1):
        raise ValidationError(
            f"signal center ({config.center_row}, {config.center_col}) is outside "
            f"the {height}x{width} image"
        )
    r = np.arange(height, dtype=np.float64)[:, None] - config.center_row
    c = np.arange(width, dtype=np.float64)[None, :] - config.center_col
    s = config.amplitude * np.exp(-(r**2 + c**2) / (2.0 * config.sigma**2))
    return SignalImage(s.ravel(), height, width)


def assemble_dataset(
    backgrounds: ImageStack,
    signal: SignalImage,
    noise: NoiseConfig,
    fraction_present: float = 0.5,
) -> ImageStack:
    """Form ``g = b + n`` (label 0) or ``g = b + s + n`` (label 1).

    ``round(fraction_present * N)`` images, chosen by a shuffle seeded from
    ``noise.seed``, receive the signal. The same generator then draws the
    i.i.d. noise for every image.
    """
    if signal.m != backgrounds.m or (signal.height, signal.width) != (
        backgrounds.height,
        backgrounds.width,
    ):
        raise ValidationError(
            f"signal is {signal.height}x{signal.width}, "
            f"backgrounds are {backgrounds.height}x{backgrounds.width}"
        )
    if not 0.0 <= fraction_present <= 1.0:
        raise ValidationError(f"fraction_present must lie in [0, 1], got {fraction_present}")
    n = backgrounds.n
    n_present = int(np.floor(fraction_present * n + 0.5))
    rng = np.random.default_rng(noise.seed)
    labels = np.zeros(n, dtype=np.uint8)
    labels[:n_present] = 1
    labels = labels[rng.permutation(n)]
    data = backgrounds.data + labels[:, None] * signal.s[None, :]
    if noise.sigma_n > 0:
        for start in range(0, n, _BLOCK):
            stop = min(start + _BLOCK, n)
            data[start:stop] += noise.sigma_n * rng.standard_normal((stop - start, backgrounds.m))
    return ImageStack(data, labels, backgrounds.height, backgrounds.width)


# --------------------------------------------------------------------------
# ROI ingestion
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
_RAW_DTYPES = {"f32": "<f4", "f64": "<f8"}


def read_roi_manifest(path: str | os.PathLike) -> dict:
    """Parse ``manifest.txt``: ``height=``, ``width=``, ``dtype=``, ``order=`` lines."""
    fields = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise IngestionError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        fields[key] = value
    unknown = set(fields) - {"height", "width", "dtype", "order"}
    if unknown:
        raise IngestionError(f"{path}: unknown manifest keys {sorted(unknown)}")
    try:
        height, width = int(fields["height"]), int(fields["width"])
    except KeyError as exc:
        raise IngestionError(f"{path}: manifest is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise IngestionError(f"{path}: bad dimension: {exc}") from None
    if height < 1 or width < 1:
        raise IngestionError(f"{path}: dimensions must be positive, got {height}x{width}")
    dtype = fields.get("dtype", "f64")
    if dtype not in _RAW_DTYPES:
        raise IngestionError(f"{path}: dtype must be f32 or f64, got {dtype!r}")
    order = fields.get("order", "row-major")
    if order != "row-major":
        raise IngestionError(f"{path}: only order=row-major is supported, got {order!r}")
    return {"height": height, "width": width, "dtype": dtype, "order": order}


def load_roi_directory(path: str | os.PathLike) -> ImageStack:
    """Load every ROI in ``path`` as a background stack (files in name order).

    With a ``manifest.txt`` every other regular file is a bare pixel payload;
    otherwise every ``*.mobs`` file is read.
    """
    root = Path(path)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a readable directory")
    manifest_path = root / MANIFEST_NAME
    rows = []
    shape = None
    if manifest_path.exists():
        manifest = read_roi_manifest(manifest_path)
        shape = (manifest["height"], manifest["width"])
        m = shape[0] * shape[1]
        dtype = np.dtype(_RAW_DTYPES[manifest["dtype"]])
        files = sorted(p for p in root.iterdir() if p.is_file() and p.name != MANIFEST_NAME)
        for f in files:
            raw = f.read_bytes()
            if len(raw) != m * dtype.itemsize:
                raise IngestionError(
                    f"{f.name}: size {len(raw)} bytes does not match manifest "
                    f"{shape[0]}x{shape[1]} {manifest['dtype']} ({m * dtype.itemsize} bytes)"
                )
            rows.append(np.frombuffer(raw, dtype=dtype).astype(np.float64)[None, :])
    else:
        files = sorted(root.glob("*.mobs"))
        for f in files:
            try:
                stack = read_image_stack(f)
            except (FormatError, ValidationError, OSError) as exc:
                raise IngestionError(f"{f.name}: {exc}") from exc
            if shape is None:
                shape = (stack.height, stack.width)
            elif (stack.height, stack.width) != shape:
                raise IngestionError(
                    f"{f.name}: ROI is {stack.height}x{stack.width}, "
                    f"expected {shape[0]}x{shape[1]}"
                )
            rows.append(stack.data)
    if not rows:
        raise IngestionError(f"no ROI files found in {root}")
    data = np.concatenate(rows)
    log.info("loaded %d ROIs of %dx%d from %s", data.shape[0], shape[0], shape[1], root)
    return ImageStack(data, np.zeros(data.shape[0], dtype=np.uint8), shape[0], shape[1])


def ingest_roi_directory(
    path: str | os.PathLike,
    signal: SignalImage,
    noise: NoiseConfig,
    fraction_present: float = 0.5,
) -> ImageStack:
    """Load ROI backgrounds from ``path`` and insert signal and noise."""
    backgrounds = load_roi_directory(path)
    if (signal.height, signal.width) != (backgrounds.height, backgrounds.width):
        raise IngestionError(
            f"signal is {signal.height}x{signal.width} but ROIs in {path} are "
            f"{backgrounds.height}x{backgrounds.width}"
        )
    return assemble_dataset(backgrounds, signal, noise, fraction_present)
