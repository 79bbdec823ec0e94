"""Image containers shared by every other module.

Images are H×W×3 float arrays with values in [-1, 1], tagged with the
domain they belong to (photo-like faces or line-drawing sketches).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class Domain(enum.Enum):
    FACE = "face"
    SKETCH = "sketch"


class ShapeError(ValueError):
    """Raised when an array does not meet the square power-of-two contract."""


class DomainError(ValueError):
    """Raised when an operation receives an image from the wrong domain."""


MIN_SIZE = 8  # smallest side the architectures accept


def _validate_pixels(pixels: np.ndarray) -> None:
    if not isinstance(pixels, np.ndarray):
        raise ShapeError(f"pixels must be a numpy array, got {type(pixels).__name__}")
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected H×W×3 array, got shape {pixels.shape}")
    h, w = pixels.shape[:2]
    if h != w:
        raise ShapeError(f"image must be square, got {h}×{w}")
    if h < MIN_SIZE or (h & (h - 1)) != 0:
        raise ShapeError(f"side must be a power of two >= {MIN_SIZE}, got {h}")
    if not np.issubdtype(pixels.dtype, np.floating):
        raise ShapeError(f"pixels must be floating point, got {pixels.dtype}")
    if not np.all(np.isfinite(pixels)):
        raise ValueError("pixels contain non-finite values")
    lo, hi = float(pixels.min()), float(pixels.max())
    if lo < -1.0 or hi > 1.0:
        raise ValueError(f"pixel values must lie in [-1, 1], got [{lo}, {hi}]")


@dataclass(frozen=True)
class DomainImage:
    """A square RGB image in [-1, 1] tagged with its domain."""

    pixels: np.ndarray
    domain: Domain

    def __post_init__(self):
        _validate_pixels(self.pixels)
        if not isinstance(self.domain, Domain):
            raise DomainError(f"domain must be a Domain, got {self.domain!r}")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> "DomainImage":
        return DomainImage(pixels, self.domain)


def require_domain(image: DomainImage, domain: Domain, what: str = "image") -> None:
    if image.domain is not domain:
        raise DomainError(f"{what} must be in the {domain.value} domain, got {image.domain.value}")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to 8-bit, the on-disk representation."""
    arr = np.clip(pixels, -1.0, 1.0)
    return np.round((arr + 1.0) * 127.5).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / 127.5 - 1.0


def save_image(image: DomainImage | np.ndarray, path: str | Path) -> None:
    pixels = image.pixels if isinstance(image, DomainImage) else image
    PILImage.fromarray(to_uint8(pixels)).save(str(path), format="PNG")


def load_image(path: str | Path, domain: Domain) -> DomainImage:
    with PILImage.open(str(path)) as im:
        arr = np.asarray(im.convert("RGB"))
    return DomainImage(from_uint8(arr), domain)


def png_bytes(image: DomainImage | np.ndarray) -> bytes:
    import io

    pixels = image.pixels if isinstance(image, DomainImage) else image
    buf = io.BytesIO()
    PILImage.fromarray(to_uint8(pixels)).save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes, domain: Domain) -> DomainImage:
    import io

    with PILImage.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"))
    return DomainImage(from_uint8(arr), domain)
