"""Image buffers and lossless PNG I/O.

All pixel data in the package is float64 RGB in [0, 1], laid out H x W x 3.
Conversion to/from NCHW torch tensors happens at the network boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

MIN_SIZE = 8


class ImageError(ValueError):
    """Raised for malformed image buffers."""


@dataclass
class ImageBuffer:
    pixels: np.ndarray
    color_space: str = field(default="sRGB", init=False)

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"expected H x W x 3 pixels, got shape {px.shape}")
        if px.shape[0] < MIN_SIZE or px.shape[1] < MIN_SIZE:
            raise ImageError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {px.shape[:2]}")
        if not np.all(np.isfinite(px)):
            raise ImageError("image contains NaN or Inf")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ImageError(f"pixel values outside [0, 1]: [{px.min()}, {px.max()}]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def to_tensor(self) -> torch.Tensor:
        """1 x 3 x H x W float32 tensor."""
        return torch.from_numpy(self.pixels.transpose(2, 0, 1).copy()).float().unsqueeze(0)

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "ImageBuffer":
        if t.dim() == 4:
            if t.shape[0] != 1:
                raise ImageError("from_tensor expects a single image")
            t = t[0]
        px = t.detach().cpu().double().clamp(0.0, 1.0).numpy().transpose(1, 2, 0)
        return cls(px)

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(arr.astype(np.float64) / 255.0)


def stack(images) -> torch.Tensor:
    return torch.cat([im.to_tensor() for im in images], dim=0)


def read_rgb(path) -> np.ndarray:
    """Any-size RGB image as a float64 array in [0, 1]."""
    arr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if arr is None:
        raise ImageError(f"cannot read image {path}")
    return cv2.cvtColor(arr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0


def write_rgb(path, pixels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise ImageError(f"cannot write image {path}")


def read_png(path) -> ImageBuffer:
    return ImageBuffer(read_rgb(path))


def write_png(path, img: ImageBuffer) -> None:
    write_rgb(path, img.pixels)


def list_images(directory) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
