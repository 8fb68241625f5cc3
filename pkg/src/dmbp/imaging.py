"""Image decoding, attribution-map rendering, and the raw map format.

Accepted image inputs are binary PPM (P6) and 8-bit RGB/RGBA PNG; other PNG
bit depths and color types are rejected rather than silently converted.
Decoded images are (3, H, W) floats in [0, 1].

Raw attribution maps are serialized as (little-endian):

    magic "DMBPA001" (8 bytes)
    u32 height, u32 width
    height x width float32 values, row-major
    u16 metadata length, UTF-8 JSON metadata

The metadata JSON is written with sorted keys so write(read(f)) is
bit-exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import DecodeError, DimensionError, FormatError, NumericError

RAW_MAGIC = b"DMBPA001"
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


@dataclass
class AttributionMap:
    """Signed per-pixel attribution values plus bookkeeping metadata.

    For DMBP maps, positive/negative hold the channel-summed contributions
    of the two mask-selected gradient routes; they are not serialized.
    """

    values: np.ndarray
    metadata: dict = field(default_factory=dict)
    positive: Optional[np.ndarray] = None
    negative: Optional[np.ndarray] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or min(self.values.shape) < 1:
            raise DimensionError(f"attribution map must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("attribution map contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# decoding

def _decode_ppm(data: bytes, path) -> np.ndarray:
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            return token()
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError(f"{path}: corrupt PPM header")
        return data[start:pos]

    if token() != b"P6":
        raise DecodeError(f"{path}: not a P6 PPM file")
    try:
        width, height, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise DecodeError(f"{path}: corrupt PPM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 256:
        raise DecodeError(f"{path}: unsupported PPM dimensions or maxval")
    pos += 1  # single whitespace byte after maxval
    raster = data[pos : pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise DecodeError(f"{path}: PPM raster truncated")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pixels.transpose(2, 0, 1).astype(np.float32) / maxval


def _decode_png(data: bytes, path) -> np.ndarray:
    # Peek at IHDR so unsupported bit depths fail loudly instead of being
    # converted by the decoder.
    if len(data) < 26 or data[12:16] != b"IHDR":
        raise DecodeError(f"{path}: corrupt PNG header")
    bit_depth, color_type = data[24], data[25]
    if bit_depth != 8 or color_type not in (2, 6):
        raise DecodeError(
            f"{path}: only 8-bit RGB/RGBA PNG is supported (depth {bit_depth}, color type {color_type})"
        )
    import io

    try:
        with Image.open(io.BytesIO(data)) as im:
            arr = np.asarray(im)
    except Exception as exc:
        raise DecodeError(f"{path}: PNG decode failed: {exc}") from exc
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise DecodeError(f"{path}: unexpected PNG pixel layout {arr.shape}")
    return arr[:, :, :3].transpose(2, 0, 1).astype(np.float32) / 255.0


def decode_image(path) -> np.ndarray:
    """Decode a PPM (P6) or 8-bit RGB PNG file to (3, H, W) floats in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DecodeError(f"{path}: cannot read image: {exc}") from exc
    if data[:2] == b"P6":
        return _decode_ppm(data, path)
    if data[:8] == _PNG_SIGNATURE:
        return _decode_png(data, path)
    raise DecodeError(f"{path}: unsupported image format (expected P6 PPM or PNG)")


def bilinear_resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) image using half-pixel centers.

    Source coordinates are (dst + 0.5) * src/dst - 0.5, clamped at the
    borders, which keeps pixel centers aligned under integer upscaling.
    """
    if image.ndim != 3:
        raise DimensionError(f"resize expects (C, H, W), got {image.shape}")
    if height <= 0 or width <= 0:
        raise DimensionError(f"resize target must be positive, got {height}x{width}")
    c, h, w = image.shape
    if (h, w) == (height, width):
        return image.copy()

    def axis_coords(src: int, dst: int):
        s = (np.arange(dst) + 0.5) * (src / dst) - 0.5
        lo = np.clip(np.floor(s), 0, src - 1).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        frac = np.clip(s - lo, 0.0, 1.0)
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, height)
    x0, x1, fx = axis_coords(w, width)
    fy = fy[None, :, None]
    fx = fx[None, None, :]
    top = (1 - fx) * image[:, y0[:, None], x0[None, :]] + fx * image[:, y0[:, None], x1[None, :]]
    bottom = (1 - fx) * image[:, y1[:, None], x0[None, :]] + fx * image[:, y1[:, None], x1[None, :]]
    return ((1 - fy) * top + fy * bottom).astype(image.dtype)


def load_image_raw(path, spec) -> np.ndarray:
    """Decode and resize to the preprocess size, without normalization."""
    image = decode_image(path)
    return bilinear_resize(image, spec.height, spec.width)


def normalize_image(image: np.ndarray, spec) -> np.ndarray:
    """Per-channel (v - mean) / std normalization of a (3, H, W) image."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"normalize expects (3, H, W), got {image.shape}")
    mean = np.asarray(spec.mean, dtype=image.dtype)[:, None, None]
    std = np.asarray(spec.std, dtype=image.dtype)[:, None, None]
    return (image - mean) / std


def load_image(path, spec) -> np.ndarray:
    """Decode, bilinear-resize, scale to [0, 1], and normalize an image."""
    return normalize_image(load_image_raw(path, spec), spec)


# ---------------------------------------------------------------------------
# rendering

def heatmap_pixels(amap: AttributionMap) -> np.ndarray:
    """Diverging colormap as (H, W, 3) uint8: 0 -> white, +max -> red, -max -> blue.

    Values are normalized by max |a|, so the rendering is invariant to
    positive rescaling of the map.  An all-zero map renders white.
    """
    values = amap.values.astype(np.float64)
    scale = np.max(np.abs(values))
    v = values / scale if scale > 0 else np.zeros_like(values)
    pos = np.clip(v, 0.0, 1.0)
    neg = np.clip(-v, 0.0, 1.0)
    rgb = np.stack([1.0 - neg, 1.0 - pos - neg, 1.0 - pos], axis=-1)
    return np.rint(rgb * 255.0).clip(0, 255).astype(np.uint8)


def render_heatmap(amap: AttributionMap, out_path, overlay: Optional[np.ndarray] = None, alpha: float = 0.5):
    """Write the heatmap PNG, optionally alpha-blended over a source image.

    overlay, when given, is a (3, H, W) image in [0, 1] matching the map's
    spatial dims.
    """
    rgb = heatmap_pixels(amap).astype(np.float64) / 255.0
    if overlay is not None:
        if overlay.ndim != 3 or overlay.shape[1:] != amap.values.shape:
            raise DimensionError(
                f"overlay shape {overlay.shape} does not match map {amap.values.shape}"
            )
        if not 0 < alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        rgb = (1.0 - alpha) * overlay.transpose(1, 2, 0) + alpha * rgb
    pixels = np.rint(rgb * 255.0).clip(0, 255).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(Path(out_path), format="PNG")


# ---------------------------------------------------------------------------
# raw map format

def write_raw(amap: AttributionMap, path):
    """Serialize a map to the raw format; values are stored as float32."""
    meta = json.dumps(amap.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    if len(meta) > 0xFFFF:
        raise ValueError(f"metadata too large to serialize ({len(meta)} bytes)")
    h, w = amap.values.shape
    payload = amap.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(payload)
        fh.write(struct.pack("<H", len(meta)))
        fh.write(meta)


def read_raw(path) -> AttributionMap:
    """Parse a raw map file; inverse of write_raw up to float32 storage."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read map file: {exc}") from exc
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise FormatError(f"{path}: truncated raw map at byte {off}")
        chunk = data[off : off + n]
        off += n
        return chunk

    if take(8) != RAW_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {RAW_MAGIC.decode()}")
    h, w = struct.unpack("<II", take(8))
    if h == 0 or w == 0:
        raise FormatError(f"{path}: non-positive map dimensions {h}x{w}")
    values = np.frombuffer(take(4 * h * w), dtype="<f4").reshape(h, w).copy()
    (mlen,) = struct.unpack("<H", take(2))
    raw_meta = take(mlen)
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    try:
        metadata = json.loads(raw_meta.decode("utf-8")) if mlen else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: metadata is not valid JSON") from exc
    if not isinstance(metadata, dict):
        raise FormatError(f"{path}: metadata must be a JSON object")
    return AttributionMap(values=values, metadata=metadata)
