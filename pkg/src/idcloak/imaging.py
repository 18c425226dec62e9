"""Image arrays, 8-bit PPM/PGM I/O, pipeline operators, SSIM and wash-out filters.

Images are float64 arrays of shape (H, W, C) with C in {1, 3} and values in
[0, 1]. Batched tensors used by the models are (N, C, H, W).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from . import numerics as nx

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# ITU T.81 Annex K luminance table
JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    side: int

    def check(self, height: int, width: int) -> None:
        if (self.side < 1 or self.top < 0 or self.left < 0
                or self.top + self.side > height or self.left + self.side > width):
            raise ValueError(f"crop {self} does not fit inside a {height}x{width} image")


def as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) image, got shape {x.shape}")
    return x


def validate(x: np.ndarray) -> None:
    if x.shape[0] < 8 or x.shape[1] < 8:
        raise ValueError(f"image must be at least 8x8, got {x.shape[:2]}")
    if not np.all((x >= 0.0) & (x <= 1.0)):
        raise ValueError("image pixels must lie in [0, 1]")


def to_batch(images) -> np.ndarray:
    """Stack (H, W, C) images into an (N, C, H, W) array."""
    return np.stack([as_image(x).transpose(2, 0, 1) for x in images])


def default_crop(height: int, width: int) -> CropSpec:
    side = min(height, width)
    return CropSpec((height - side) // 2, (width - side) // 2, side)


def face_crop(x: np.ndarray, spec: CropSpec | None = None) -> np.ndarray:
    """Cut the square face region; centered square when no spec is given."""
    x = as_image(x)
    spec = spec or default_crop(*x.shape[:2])
    spec.check(*x.shape[:2])
    return x[spec.top:spec.top + spec.side, spec.left:spec.left + spec.side].copy()


def resize_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    x = as_image(x)
    if x.shape[:2] == (out_h, out_w):
        return x.copy()
    chw = nx.resize_bilinear(x.transpose(2, 0, 1), out_h, out_w).data
    return chw.transpose(1, 2, 0)


def quantize(x) -> np.ndarray:
    """Snap values to the nearest multiple of 1/255, halves away from zero."""
    return nx.round_half_away(np.asarray(x, dtype=np.float64) * 255.0) / 255.0


# ---------------------------------------------------------------- SSIM

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def _window_matrix(n: int) -> np.ndarray:
    if n < SSIM_WINDOW:
        return np.full((1, n), 1.0 / n)
    g = gaussian_window()
    m = np.zeros((n - SSIM_WINDOW + 1, n))
    for i in range(m.shape[0]):
        m[i, i:i + SSIM_WINDOW] = g
    return m


def ssim_tensor(a, b) -> nx.Tensor:
    """Per-sample SSIM for (N, C, H, W) tensors, differentiable in both inputs.

    Local statistics use an 11x11 Gaussian window (valid positions only); an
    image side shorter than the window falls back to uniform global statistics
    along that side.
    """
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise nx.ShapeError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    rows, cols = _window_matrix(h), _window_matrix(w)

    def filt(t):
        return nx.linmap2d(t, rows, cols)

    mu_a, mu_b = filt(a), filt(b)
    mu_aa, mu_bb, mu_ab = nx.square(mu_a), nx.square(mu_b), mu_a * mu_b
    var_a = filt(nx.square(a)) - mu_aa
    var_b = filt(nx.square(b)) - mu_bb
    cov = filt(a * b) - mu_ab
    num = (2.0 * mu_ab + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_aa + mu_bb + SSIM_C1) * (var_a + var_b + SSIM_C2)
    smap = num / den
    n = a.shape[0]
    return nx.mean(nx.reshape(smap, (n, -1)), axis=1)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ {a.shape} vs {b.shape}")
    return float(ssim_tensor(to_batch([a]), to_batch([b])).data[0])


# ---------------------------------------------------------------- filters

def gaussian_filter(x: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = as_image(x)
    out = ndimage.gaussian_filter(x, sigma=(sigma, sigma, 0), mode="reflect")
    return np.clip(out, 0.0, 1.0)


def median_filter(x: np.ndarray, k: int) -> np.ndarray:
    if k < 3 or k % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 3, got {k}")
    x = as_image(x)
    out = ndimage.median_filter(x, size=(k, k, 1), mode="reflect")
    return np.clip(out, 0.0, 1.0)


def jpeg_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((JPEG_LUMA * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def jpeg_filter(x: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block DCT quantization round trip per channel, no entropy coding."""
    if not 1 <= quality <= 100:
        raise ValueError(f"jpeg quality must be in [1, 100], got {quality}")
    x = as_image(x)
    h, w, c = x.shape
    ph, pw = -h % 8, -w % 8
    padded = np.pad(x * 255.0 - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    bh, bw = padded.shape[0] // 8, padded.shape[1] // 8
    # (bh, 8, bw, 8, c) -> (bh, bw, c, 8, 8)
    blocks = padded.reshape(bh, 8, bw, 8, c).transpose(0, 2, 4, 1, 3)
    table = jpeg_table(quality)
    coef = fft.dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    coef = nx.round_half_away(coef / table) * table
    rec = fft.idctn(coef, type=2, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(bh * 8, bw * 8, c)[:h, :w]
    return np.clip((rec + 128.0) / 255.0, 0.0, 1.0)


# ---------------------------------------------------------------- file I/O

def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError(f"unexpected end of header at byte {start}")
    return buf[start:pos], pos


def load_image(path) -> np.ndarray:
    """Read an 8-bit binary PPM (P6) or PGM (P5) file into [0, 1] floats."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {magic!r} at byte 0 (want P5 or P6)")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"non-numeric {name} {tok!r} before byte {pos}")
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} before byte {pos} (only 255)")
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions {width}x{height}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(f"missing separator after header at byte {pos}")
    pos += 1
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise ImageFormatError(
            f"truncated payload: expected {need} bytes from byte {pos}, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.astype(np.float64) / 255.0


def to_bytes(x: np.ndarray) -> np.ndarray:
    return np.clip(nx.round_half_away(as_image(x) * 255.0), 0, 255).astype(np.uint8)


def save_image(x: np.ndarray, path) -> None:
    """Quantize to 8 bits and write P6 (3 channels) or P5 (1 channel)."""
    data = to_bytes(x)
    h, w, c = data.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + data.tobytes())
