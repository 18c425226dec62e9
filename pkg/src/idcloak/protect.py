"""Applying a mask to a shareable image, removing it with the key, and the key file."""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from . import imaging
from .maskgen import MASK_VERSION, PrivacyMask

KEY_MAGIC = b"P3MK"
# magic, version, height, width, channels, epsilon
_HEAD = struct.Struct("<4sHHHBd")


class MaskFileError(ValueError):
    pass


def mask_field(mask: PrivacyMask, side: int) -> np.ndarray:
    """QR(mask): the mask resized to the crop side and snapped to the 8-bit grid."""
    return imaging.quantize(imaging.resize_bilinear(mask.values, side, side))


def _replace_crop(x: np.ndarray, mask: PrivacyMask, crop, sign: float) -> np.ndarray:
    x = imaging.as_image(x)
    crop = crop or imaging.default_crop(*x.shape[:2])
    crop.check(*x.shape[:2])
    if mask.channels != x.shape[2]:
        raise ValueError(f"mask has {mask.channels} channels, image has {x.shape[2]}")
    out = x.copy()
    region = out[crop.top:crop.top + crop.side, crop.left:crop.left + crop.side]
    region[...] = np.clip(region + sign * mask_field(mask, crop.side), 0.0, 1.0)
    return out


def mask_apply(x: np.ndarray, mask: PrivacyMask, crop: imaging.CropSpec | None = None) -> np.ndarray:
    """Subtract the mask inside the face crop; the result sits on the 8-bit grid.

    Pixels outside the crop are only re-quantized, which leaves images loaded
    from 8-bit files unchanged there.
    """
    return imaging.quantize(_replace_crop(x, mask, crop, -1.0))


def unmask(x_protected: np.ndarray, mask: PrivacyMask,
           crop: imaging.CropSpec | None = None) -> np.ndarray:
    """Add the mask back inside the crop. A wrong key or crop is not detected."""
    return imaging.quantize(_replace_crop(x_protected, mask, crop, 1.0))


def saturated(x: np.ndarray, mask: PrivacyMask, crop: imaging.CropSpec | None = None) -> np.ndarray:
    """Boolean map of crop pixels where masking clips at 0 or 1."""
    x = imaging.as_image(x)
    crop = crop or imaging.default_crop(*x.shape[:2])
    region = x[crop.top:crop.top + crop.side, crop.left:crop.left + crop.side]
    raw = region - mask_field(mask, crop.side)
    return (raw < 0.0) | (raw > 1.0)


def mask_to_bytes(mask: PrivacyMask) -> bytes:
    owner = mask.owner.encode("utf-8")
    body = _HEAD.pack(KEY_MAGIC, mask.version, mask.height, mask.width, mask.channels,
                      mask.epsilon)
    body += struct.pack("<H", len(owner)) + owner + struct.pack("<Q", mask.seed)
    body += np.ascontiguousarray(mask.values, dtype="<f8").tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def mask_from_bytes(buf: bytes) -> PrivacyMask:
    if len(buf) < 4 or buf[:4] != KEY_MAGIC:
        raise MaskFileError("bad magic: not a mask key file")
    if len(buf) < _HEAD.size + 4:
        raise MaskFileError("CRC check failed: file truncated")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise MaskFileError("CRC check failed: file corrupt or truncated")
    _, version, h, w, c, eps = _HEAD.unpack_from(buf, 0)
    if version != MASK_VERSION:
        raise MaskFileError(f"unsupported mask version {version}")
    pos = _HEAD.size
    (olen,) = struct.unpack_from("<H", buf, pos)
    owner = buf[pos + 2:pos + 2 + olen].decode("utf-8")
    pos += 2 + olen
    (seed,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    n = h * w * c
    if pos + 8 * n != len(buf) - 4:
        raise MaskFileError("payload size does not match header")
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(h, w, c).copy()
    if not np.all(np.abs(values) <= eps):
        raise MaskFileError(f"mask values exceed the epsilon bound {eps}")
    return PrivacyMask(values, eps, owner, seed, version)


def mask_save(mask: PrivacyMask, path) -> None:
    Path(path).write_bytes(mask_to_bytes(mask))


def mask_load(path) -> PrivacyMask:
    return mask_from_bytes(Path(path).read_bytes())
