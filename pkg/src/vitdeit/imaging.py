"""Raster I/O (binary PPM/PGM built in, other formats through Pillow) and bilinear resizing."""

import os

import numpy as np

from .errors import DecodeError


def write_ppm(path, pixels):
    """Write an (H, W, 3) uint8 array as binary PPM (P6)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) uint8 pixels, got {pixels.dtype} {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels).tobytes())
    return path


def _read_tokens(data, count, pos):
    tokens = []
    while len(tokens) < count:
        while pos < len(data) and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path):
    """Decode binary P6 (RGB) or P5 (gray) with maxval <= 255 to (H, W, 3) uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"{path}: not a binary PPM/PGM file")
    try:
        (w, h, maxval), pos = _read_tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise DecodeError(f"{path}: malformed header") from None
    if not 0 < maxval <= 255 or w <= 0 or h <= 0:
        raise DecodeError(f"{path}: unsupported dimensions or maxval")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    body = data[pos:pos + need]
    if len(body) != need:
        raise DecodeError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    if maxval != 255:
        pixels = np.round(pixels.astype(float) * 255.0 / maxval).astype(np.uint8)
    if channels == 1:
        pixels = np.repeat(pixels, 3, axis=2)
    return pixels


def _read_with_pillow(path):
    try:
        from PIL import Image, UnidentifiedImageError
    except ImportError:
        raise DecodeError(f"{path}: unsupported format (install Pillow for compressed images)") from None
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from None


def read_image(path):
    """Decode any supported file to (H, W, 3) uint8."""
    if not os.path.exists(path):
        raise DecodeError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic in (b"P5", b"P6"):
        return read_pnm(path)
    return _read_with_pillow(path)


def resize_bilinear(image, height, width):
    """Bilinear resize with half-pixel centres and edge clamping; works on (H, W, C) or (H, W)."""
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]
    if (in_h, in_w) == (height, width):
        return image.copy()

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(height, in_h)
    x0, x1, wx = axis(width, in_w)
    if image.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bottom = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def load_image(path, target_size=None):
    """Decode to RGB, scale to [0, 1], optionally resize to ``target_size`` (int or (H, W))."""
    pixels = read_image(path).astype(np.float64) / 255.0
    if target_size is not None:
        h, w = (target_size, target_size) if np.isscalar(target_size) else target_size
        pixels = resize_bilinear(pixels, h, w)
    return pixels


def load_images(manifest, target_size=None, ids=None):
    """Stack images for ``ids`` (default: all records) into (N, H, W, 3)."""
    records = [manifest[s] for s in ids] if ids is not None else list(manifest)
    if not records:
        return np.zeros((0, target_size or 0, target_size or 0, 3))
    return np.stack([load_image(manifest.resolve(r), target_size) for r in records])


def to_uint8(image):
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
