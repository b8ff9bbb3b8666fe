"""8-bit image codecs: binary PPM/PGM by hand, PNG through Pillow."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..ndgrad import Tensor


class ImageFormatError(ValueError):
    """Unsupported or malformed image file."""


@dataclass
class ImageU8:
    """Row-major 8-bit pixels, shape H x W x C with C = 3 (RGB) or 1 (gray)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or px.dtype != np.uint8:
            raise ImageFormatError(f"expected H x W x {{1,3}} uint8 pixels, got {px.shape} {px.dtype}")
        self.pixels = np.ascontiguousarray(px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


_PNM_HEADER = re.compile(rb"(P[56])\s+(?:#.*?\n\s*)*(\d+)\s+(?:#.*?\n\s*)*(\d+)\s+(?:#.*?\n\s*)*(\d+)\s")


def decode_pnm(data: bytes) -> ImageU8:
    m = _PNM_HEADER.match(data)
    if m is None:
        raise ImageFormatError("not a binary PPM/PGM file (expected P6 or P5 header)")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM is supported (maxval {maxval})")
    if w < 1 or h < 1:
        raise ImageFormatError(f"invalid PNM size {w}x{h}")
    c = 3 if magic == b"P6" else 1
    body = data[m.end():]
    if len(body) < w * h * c:
        raise ImageFormatError(f"truncated PNM payload: {len(body)} of {w * h * c} bytes")
    px = np.frombuffer(body, dtype=np.uint8, count=w * h * c).reshape(h, w, c)
    return ImageU8(px.copy())


def encode_pnm(img: ImageU8) -> bytes:
    magic = b"P6" if img.channels == 3 else b"P5"
    return magic + b"\n%d %d\n255\n" % (img.width, img.height) + img.pixels.tobytes()


def _decode_png(path) -> ImageU8:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        if im.format != "PNG":
            raise ImageFormatError(f"{path}: expected PNG data, found {im.format}")
        mode = im.mode
        if mode in ("RGB", "L"):
            px = np.asarray(im)
        elif mode == "RGBA":
            px = np.asarray(im)[:, :, :3]
        else:
            raise ImageFormatError(
                f"{path}: unsupported PNG mode {mode!r}; only 8-bit RGB, RGBA and gray are accepted")
    return ImageU8(px.astype(np.uint8))


def load_image(path) -> ImageU8:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"\x89PNG"):
        return _decode_png(path)
    if head[:2] in (b"P6", b"P5"):
        return decode_pnm(path.read_bytes())
    raise ImageFormatError(f"{path}: unrecognised image format (PNG and binary PPM/PGM only)")


def write_image(img: ImageU8, path) -> None:
    path = Path(path)
    ext = path.suffix.lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        if ext == ".ppm" and img.channels == 1:
            img = ImageU8(np.repeat(img.pixels, 3, axis=2))
        data = encode_pnm(img)
        with open(path, "wb") as fh:
            fh.write(data)
    elif ext == ".png":
        from PIL import Image

        px = img.pixels[:, :, 0] if img.channels == 1 else img.pixels
        Image.fromarray(px, mode="L" if img.channels == 1 else "RGB").save(path, format="PNG")
    else:
        raise ImageFormatError(f"{path}: output extension must be .png, .ppm or .pgm")


def to_tensor(img: ImageU8) -> Tensor:
    """C x H x W float32 in [0, 1]."""
    return Tensor(img.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def quantize(values) -> np.ndarray:
    """Clamp to [0, 1] and round half up to bytes."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def from_tensor(t) -> ImageU8:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if data.ndim != 3:
        raise ImageFormatError(f"expected a C x H x W tensor, got shape {data.shape}")
    return ImageU8(quantize(data).transpose(1, 2, 0))


def save_image(t, path) -> None:
    write_image(from_tensor(t), path)


IMAGE_SUFFIXES = (".png", ".ppm")


def is_image_file(path: os.PathLike | str) -> bool:
    return Path(path).suffix.lower() in IMAGE_SUFFIXES
