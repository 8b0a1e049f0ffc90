"""Image array helpers: load/save, digests, clamping.

Images are numpy float32 arrays of shape (3, H, W), RGB, values in [0, 1].
cv2 is used for file IO and resizing; channel order is converted at the
boundary so everything in-process stays RGB.
"""

from __future__ import annotations

import hashlib
import os

import cv2
import numpy as np

from .errors import ParameterError

# type alias used across the package; images are not wrapped in a class
ImageArray = np.ndarray


def validate_image(image: np.ndarray, name: str = "image") -> None:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[0] != 3:
        raise ParameterError(f"{name} must be a (3, H, W) array, got {getattr(image, 'shape', None)}")
    if image.shape[1] < 1 or image.shape[2] < 1:
        raise ParameterError(f"{name} has degenerate spatial dims {image.shape[1:]}")


def clamp01(arr: np.ndarray) -> np.ndarray:
    return np.clip(arr, 0.0, 1.0)


def image_digest(image: np.ndarray) -> str:
    """Content hash of an image array: shape header plus float32 bytes."""
    arr = np.ascontiguousarray(image, dtype=np.float32)
    h = hashlib.sha256()
    h.update(b"img/f32")
    h.update(np.asarray(arr.shape, dtype="<i8").tobytes())
    h.update(arr.tobytes())
    return h.hexdigest()


def load_image(path: str | os.PathLike) -> ImageArray:
    """Read an image file into a float32 RGB (3, H, W) array in [0, 1]."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ParameterError(f"cannot decode image at {path}")
    if raw.ndim == 2:
        raw = cv2.cvtColor(raw, cv2.COLOR_GRAY2BGR)
    if raw.shape[2] == 4:
        raw = cv2.cvtColor(raw, cv2.COLOR_BGRA2BGR)
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ParameterError(f"unsupported image dtype {raw.dtype} at {path}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / scale
    return np.ascontiguousarray(rgb.transpose(2, 0, 1))


def save_image_u8(path: str | os.PathLike, image: ImageArray) -> None:
    """Write an image as 8-bit PNG (or whatever the extension says)."""
    validate_image(image)
    hwc = clamp01(image).transpose(1, 2, 0)
    u8 = np.floor(hwc * 255.0 + 0.5).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write image {path}")


def save_image_u16(path: str | os.PathLike, image: ImageArray) -> None:
    """Write an image as 16-bit PNG; keeps ~1.5e-5 quantization resolution."""
    validate_image(image)
    hwc = clamp01(image).transpose(1, 2, 0)
    u16 = np.floor(hwc * 65535.0 + 0.5).astype(np.uint16)
    if not cv2.imwrite(str(path), cv2.cvtColor(u16, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write image {path}")


def resize_bicubic(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bicubic resize of a (C, H, W) float array; single kernel convention."""
    if height < 1 or width < 1:
        raise ParameterError(f"target size must be positive, got {(height, width)}")
    hwc = np.ascontiguousarray(image.transpose(1, 2, 0), dtype=np.float32)
    out = cv2.resize(hwc, (width, height), interpolation=cv2.INTER_CUBIC)
    if out.ndim == 2:
        out = out[:, :, None]
    return np.ascontiguousarray(out.transpose(2, 0, 1))
