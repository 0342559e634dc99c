"""Pixel-level substrate: decode/encode, bilinear resize, patch SSIM, box IoU.

Images are RGB rasters with float64 values in [0, 1]. Binary PPM (P6) is the
exact-round-trip format; PNG covers real inputs via Pillow.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "ImageBuf",
    "Box",
    "ImagingError",
    "ImageParseError",
    "decode_image",
    "encode_image",
    "resize_bilinear",
    "ssim_rgb",
    "iou",
]

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


class ImagingError(Exception):
    pass


class ImageParseError(ImagingError):
    """Malformed payload; `offset` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ImageBuf:
    """Decoded RGB raster; pixels shaped (height, width, 3), values in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImagingError(f"expected (H, W, 3) pixels, got {px.shape}")
        if px.dtype != np.float64:
            object.__setattr__(self, "pixels", px.astype(np.float64))
            px = self.pixels
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ImagingError("pixel values outside [0, 1]")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box with positive area."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ImagingError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def _quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)


class _PpmReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _fail(self, msg: str):
        raise ImageParseError(msg, self.pos)

    def token(self) -> bytes:
        # skip whitespace and '#' comments, then read one token
        d, n = self.data, len(self.data)
        while self.pos < n:
            c = d[self.pos]
            if c in b" \t\r\n":
                self.pos += 1
            elif c == ord("#"):
                while self.pos < n and d[self.pos] not in b"\r\n":
                    self.pos += 1
            else:
                break
        if self.pos >= n:
            self._fail("unexpected end of header")
        start = self.pos
        while self.pos < n and d[self.pos] not in b" \t\r\n":
            self.pos += 1
        return d[start:self.pos]

    def int_token(self, what: str) -> int:
        tok = self.token()
        try:
            return int(tok)
        except ValueError:
            self.pos -= len(tok)
            self._fail(f"invalid {what} {tok!r}")


def _decode_ppm(data: bytes) -> ImageBuf:
    rd = _PpmReader(data)
    magic = rd.token()
    if magic != b"P6":
        raise ImageParseError(f"not a binary PPM (magic {magic!r})", 0)
    w = rd.int_token("width")
    h = rd.int_token("height")
    maxval = rd.int_token("maxval")
    if w < 1 or h < 1:
        raise ImageParseError(f"invalid dimensions {w}x{h}", rd.pos)
    if maxval != 255:
        raise ImageParseError(f"unsupported maxval {maxval}", rd.pos)
    if rd.pos >= len(data) or data[rd.pos] not in b" \t\r\n":
        rd._fail("missing whitespace after maxval")
    rd.pos += 1
    need = w * h * 3
    raw = data[rd.pos:rd.pos + need]
    if len(raw) < need:
        raise ImageParseError(
            f"truncated pixel data ({len(raw)} of {need} bytes)", len(data)
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return ImageBuf(arr.astype(np.float64) / 255.0)


def _encode_ppm(img: ImageBuf) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + _quantize(img.pixels).tobytes()


def _decode_png(data: bytes) -> ImageBuf:
    try:
        with Image.open(io.BytesIO(data)) as im:
            im.load()
            rgb = im.convert("RGB")
            arr = np.asarray(rgb, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise ImageParseError(f"PNG decode failed: {exc}", 0) from exc
    return ImageBuf(arr.astype(np.float64) / 255.0)


def decode_image(data: bytes) -> ImageBuf:
    """Decode a PNG or binary PPM payload; 8-bit values map to v/255."""
    if data[:2] == b"P6":
        return _decode_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        return _decode_png(data)
    raise ImageParseError("unrecognized image format", 0)


def encode_image(img: ImageBuf, fmt: str = "ppm") -> bytes:
    """Encode to canonical binary PPM (lossless round-trip) or PNG."""
    if fmt == "ppm":
        return _encode_ppm(img)
    if fmt == "png":
        buf = io.BytesIO()
        Image.fromarray(_quantize(img.pixels), mode="RGB").save(buf, format="PNG")
        return buf.getvalue()
    raise ImagingError(f"unknown format {fmt!r}")


def resize_bilinear(img: ImageBuf, new_w: int, new_h: int) -> ImageBuf:
    """Bilinear resample with half-pixel center alignment."""
    if new_w < 1 or new_h < 1:
        raise ImagingError(f"target extent must be positive, got {new_w}x{new_h}")
    src = img.pixels
    h, w = src.shape[:2]
    if (new_w, new_h) == (w, h):
        return ImageBuf(src.copy())

    def axis_coords(n_src, n_dst):
        x = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        x = np.clip(x, 0.0, n_src - 1.0)
        i0 = np.minimum(x.astype(np.int64), n_src - 1 if n_src == 1 else n_src - 2)
        frac = x - i0
        return i0, frac

    yi, yf = axis_coords(h, new_h)
    xi, xf = axis_coords(w, new_w)
    y1 = np.minimum(yi + 1, h - 1)
    x1 = np.minimum(xi + 1, w - 1)
    yf = yf[:, None, None]
    xf = xf[None, :, None]
    top = src[yi][:, xi] * (1 - xf) + src[yi][:, x1] * xf
    bot = src[y1][:, xi] * (1 - xf) + src[y1][:, x1] * xf
    out = top * (1 - yf) + bot * yf
    return ImageBuf(np.clip(out, 0.0, 1.0))


def ssim_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """Whole-patch RGB SSIM: per-channel global statistics, averaged over channels.

    Stabilizers C1=(0.01)^2, C2=(0.03)^2 assume a [0, 1] dynamic range. One
    score per patch; no sliding window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[2] != 3:
        raise ImagingError(f"patch shapes must match and be (H, W, 3): {a.shape} vs {b.shape}")
    total = 0.0
    for c in range(3):
        pa, pb = a[:, :, c], b[:, :, c]
        mu_a, mu_b = pa.mean(), pb.mean()
        var_a = ((pa - mu_a) ** 2).mean()
        var_b = ((pb - mu_b) ** 2).mean()
        cov = ((pa - mu_a) * (pb - mu_b)).mean()
        total += ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
            (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
        )
    return total / 3.0


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area, in [0, 1]."""
    ix = max(0.0, min(a.x1, b.x1) - max(a.x0, b.x0))
    iy = max(0.0, min(a.y1, b.y1) - max(a.y0, b.y0))
    inter = ix * iy
    return inter / (a.area + b.area - inter)
