"""Core pixel- and latent-space value types.

Images are stored channel-last as float64 in a declared value range
(unit range ``[0, 1]`` on disk and in the data pipeline, symmetric
``[-1, 1]`` inside the model stack).  Masks are scalar fields in
``[0, 1]``.  Latents live at 1/``resolution_factor`` of the image
resolution with an arbitrary channel count.

All three containers are immutable: the wrapped arrays are marked
read-only at construction, so they can be shared freely across
concurrent pipeline stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

UNIT_RANGE = (0.0, 1.0)
SYMMETRIC_RANGE = (-1.0, 1.0)

# Grayscale mask PNGs are written 16-bit so that near-zero blur tails
# survive a save/load round trip without flipping the zero set.
MASK_PNG_SCALE = 65535


class GridError(ValueError):
    """Shape, range or finiteness violation in a grid container."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ImageGrid:
    """H x W x 3 image in a declared value range."""

    data: np.ndarray
    value_range: tuple[float, float] = UNIT_RANGE

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise GridError(f"image must be HxWx3, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GridError("image contains non-finite values")
        lo, hi = self.value_range
        # Tiny numeric spill from blends/filters is clipped, real range
        # violations are rejected.
        if arr.min() < lo - 1e-9 or arr.max() > hi + 1e-9:
            raise GridError(
                f"image values [{arr.min():.4g}, {arr.max():.4g}] outside "
                f"declared range [{lo}, {hi}]"
            )
        object.__setattr__(self, "data", _freeze(np.clip(arr, lo, hi)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Mask:
    """H x W scalar field in [0, 1].

    ``kind`` tracks the lifecycle stage: ``binary`` (straight out of the
    face parser, {0, 1} only), ``blurred`` (after Gaussian softening) or
    ``latent_downsampled`` (area-pooled to latent resolution).
    """

    data: np.ndarray
    kind: str = "binary"

    KINDS = ("binary", "blurred", "latent_downsampled")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise GridError(f"unknown mask kind {self.kind!r}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise GridError(f"mask must be HxW, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GridError("mask contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise GridError("mask values must lie in [0, 1]")
        if self.kind == "binary" and not np.all((arr == 0.0) | (arr == 1.0)):
            raise GridError("binary mask may contain only {0, 1}")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def coverage(self) -> float:
        """Fraction of pixels with any mask weight."""
        return float(np.mean(self.data > 0.0))


@dataclass(frozen=True)
class LatentGrid:
    """h x w x c latent array at 1/resolution_factor image resolution."""

    data: np.ndarray
    resolution_factor: int = 8

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise GridError(f"latent must be hxwxc, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise GridError("latent contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def like(self, data: np.ndarray) -> "LatentGrid":
        """New latent with the same resolution factor."""
        return LatentGrid(data, resolution_factor=self.resolution_factor)


def quantize_unit(arr: np.ndarray) -> np.ndarray:
    """Snap unit-range values onto the 8-bit grid (k/255)."""
    return np.round(np.asarray(arr, dtype=np.float64) * 255.0) / 255.0


def save_image(image: ImageGrid, path: str | Path) -> None:
    if image.value_range != UNIT_RANGE:
        raise GridError("only unit-range images are written to disk")
    payload = np.round(image.data * 255.0).astype(np.uint8)
    Image.fromarray(payload, mode="RGB").save(Path(path), format="PNG")


def load_image(path: str | Path) -> ImageGrid:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return ImageGrid(arr)


def save_mask(mask: Mask, path: str | Path) -> None:
    payload = np.round(mask.data * MASK_PNG_SCALE).astype(np.uint16)
    Image.fromarray(payload).save(Path(path), format="PNG")


def load_mask(path: str | Path, kind: str = "blurred") -> Mask:
    with Image.open(Path(path)) as img:
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise GridError(f"mask file {path} is not single-channel")
    return Mask(arr / MASK_PNG_SCALE, kind=kind)
