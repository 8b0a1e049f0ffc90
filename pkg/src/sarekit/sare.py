"""Reconstruction-difference feature extraction and its resize conventions.

The feature is the per-pixel absolute difference between an image and its
caption-guided reconstruction, computed in pixel space on the
preprocessed (long-side-512) image and fed to the detector at 224x224.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import ParameterError, ShapeError
from .images import ImageArray, clamp01, resize_bicubic, save_image_u8, validate_image

if TYPE_CHECKING:
    from .recon import ReconstructionConfig

RECON_LONG_SIDE = 512
ENCODER_INPUT_SIZE = 224
_RAW_MAGIC = b"SARERAW1"


@dataclass(frozen=True)
class SareMap:
    """Absolute reconstruction difference, same shape as the input image."""

    data: np.ndarray
    input_digest: str = ""
    config_ref: "ReconstructionConfig | None" = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != 3:
            raise ParameterError(f"sare map must be (3, H, W), got {arr.shape}")
        if np.any(arr < 0.0):
            raise ParameterError("sare map entries must be >= 0")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)


def round_to_multiple(x: float, multiple: int) -> int:
    """Nearest multiple, half rounding up, floored at one multiple."""
    return max(multiple, int(math.floor(x / multiple + 0.5)) * multiple)


def preprocess_for_recon(
    image: ImageArray,
    long_side: int = RECON_LONG_SIDE,
    multiple: int = 8,
) -> ImageArray:
    """Aspect-preserving bicubic resize so max(H, W) = long_side.

    Both output dims are then rounded to the nearest multiple of the
    codec's spatial downscale factor (default 8) and values re-clamped
    to [0, 1].
    """
    validate_image(image)
    h, w = image.shape[1], image.shape[2]
    scale = long_side / max(h, w)
    nh = round_to_multiple(h * scale, multiple)
    nw = round_to_multiple(w * scale, multiple)
    if (nh, nw) == (h, w):
        return np.asarray(image, dtype=np.float32)
    return clamp01(resize_bicubic(np.asarray(image, dtype=np.float32), nh, nw))


def compute_sare(x: ImageArray, x_hat: ImageArray) -> SareMap:
    """Elementwise |x - x_hat| of an image and its reconstruction."""
    x = np.asarray(x, dtype=np.float32)
    x_hat = np.asarray(x_hat, dtype=np.float32)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    return SareMap(data=np.abs(x - x_hat))


def prepare_sare_input(s: SareMap, size: int = ENCODER_INPUT_SIZE) -> np.ndarray:
    """Resize a sare map to the square encoder input, re-clamped to [0, 1]."""
    return clamp01(resize_bicubic(s.data, size, size))


def save_sare_raw(path: str | os.PathLike, s: SareMap) -> None:
    """Float-fidelity storage: magic, shape triple, little-endian float32."""
    arr = np.ascontiguousarray(s.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<3I", *arr.shape))
        fh.write(arr.tobytes())


def load_sare_raw(path: str | os.PathLike) -> SareMap:
    with open(path, "rb") as fh:
        magic = fh.read(len(_RAW_MAGIC))
        if magic != _RAW_MAGIC:
            raise ParameterError(f"not a raw sare file: {path}")
        shape = struct.unpack("<3I", fh.read(12))
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(shape)
    return SareMap(data=data.copy())


def save_sare_png(path: str | os.PathLike, s: SareMap) -> None:
    """Lossless but 8-bit-quantized storage for inspection."""
    save_image_u8(path, clamp01(s.data))
