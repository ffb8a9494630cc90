"""Image and tensor containers plus file I/O.

Images are plain ``(H, W, 3)`` float arrays, scalar fields ``(H, W)`` and
network tensors ``(N, C, H, W)``. Validation lives in :func:`as_image` and
:func:`as_field`; nothing here owns data beyond what numpy already does.

Tensors are stored in the FWBT container::

    b"FWBT" | version u8 = 1 | dtype u8 = 0 (f32 LE) | rank u8 | rank x u32 LE dims | payload
"""
import os
import struct

import cv2
import numpy as np

FWBT_MAGIC = b"FWBT"
FWBT_VERSION = 1
FWBT_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sBBB")
_U32_MAX = 2**32 - 1


class ImageFileNotFound(FileNotFoundError):
    pass


class UnsupportedImageFormat(ValueError):
    pass


class FwbtError(ValueError):
    """Malformed FWBT container (bad magic, truncated payload, bad dims)."""


def as_image(data, dtype=np.float32):
    """Validate and return an (H, W, 3) image array.

    Values must be finite and non-negative. Values above 1 are allowed
    (synthesized hazy frames with A > 1 exceed unit range).
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if np.any(arr < 0):
        raise ValueError("image contains negative values")
    return arr


def as_field(data, dtype=np.float32):
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"scalar field must have shape (H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("scalar field contains non-finite values")
    return arr


def load_image(path):
    """Read an 8- or 16-bit RGB raster as floats in [0, 1], no gamma."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise ImageFileNotFound(path)
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise UnsupportedImageFormat(f"{path}: not a decodable raster")
    if raw.ndim != 3 or raw.shape[2] not in (3, 4):
        raise UnsupportedImageFormat(f"{path}: expected RGB, got shape {raw.shape}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise UnsupportedImageFormat(f"{path}: unsupported bit depth {raw.dtype}")
    rgb = cv2.cvtColor(raw[:, :, :3], cv2.COLOR_BGR2RGB)
    return (rgb.astype(np.float64) / scale).astype(np.float32)


def quantize8(img):
    """Clamp to [0, 1] and round to nearest 8-bit code."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img, path):
    """Write an image as an 8-bit RGB PNG (clamped, round-to-nearest)."""
    arr = as_image(img, dtype=np.float64)
    codes = quantize8(arr)
    path = os.fspath(path)
    if not cv2.imwrite(path, cv2.cvtColor(codes, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write image to {path}")


def write_tensor(data, path):
    arr = np.asarray(data)
    if arr.ndim not in (2, 3, 4):
        raise FwbtError(f"rank must be 2, 3 or 4, got {arr.ndim}")
    if any(d == 0 for d in arr.shape):
        raise FwbtError(f"empty dimension in shape {arr.shape}")
    if any(d > _U32_MAX for d in arr.shape):
        raise FwbtError(f"dimension overflow in shape {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(payload)):
        raise FwbtError("tensor contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FWBT_MAGIC, FWBT_VERSION, FWBT_DTYPE_F32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(payload.tobytes())


def read_tensor(path):
    """Read an FWBT file back into a float32 array of its stored shape."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FwbtError("truncated header")
    magic, version, dtype, rank = _HEADER.unpack_from(blob)
    if magic != FWBT_MAGIC:
        raise FwbtError("bad magic")
    if version != FWBT_VERSION:
        raise FwbtError(f"unsupported version {version}")
    if dtype != FWBT_DTYPE_F32:
        raise FwbtError(f"unsupported dtype code {dtype}")
    if rank not in (2, 3, 4):
        raise FwbtError(f"unsupported rank {rank}")
    offset = _HEADER.size
    if len(blob) < offset + 4 * rank:
        raise FwbtError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    if any(d == 0 for d in shape):
        raise FwbtError(f"empty dimension in shape {shape}")
    count = int(np.prod(shape, dtype=np.uint64))
    if len(blob) - offset != 4 * count:
        raise FwbtError(f"truncated payload: expected {4 * count} bytes, got {len(blob) - offset}")
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return arr.reshape(shape).astype(np.float32)


def image_to_tensor(img):
    """(H, W, C) -> (1, C, H, W)."""
    return np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1)[None])


def tensor_to_image(t):
    """(1, C, H, W) -> (H, W, C)."""
    t = np.asarray(t)
    if t.ndim != 4 or t.shape[0] != 1:
        raise ValueError(f"expected a single-item batch, got {t.shape}")
    return np.ascontiguousarray(t[0].transpose(1, 2, 0))
