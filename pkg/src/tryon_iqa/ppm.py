"""Binary P6 pixel maps, the only image format the pipeline reads."""

from __future__ import annotations

import os

import numpy as np

from .errors import ParseError
from .model import preprocess

MAX_PIXELS = 1 << 26


def _tokens(buf: bytes, count: int, where: str) -> tuple[list[bytes], int]:
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ParseError("truncated PPM header", where)
        out.append(buf[start:i])
    return out, i


def decode_ppm(buf: bytes, where: str = "<bytes>") -> np.ndarray:
    """Raw H x W x 3 uint8 pixels from P6 bytes (maxval below 255 is rescaled)."""
    toks, i = _tokens(buf, 4, where)
    if toks[0] != b"P6":
        raise ParseError(f"not a binary PPM (magic {toks[0][:8]!r})", where)
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as e:
        raise ParseError(f"malformed PPM header: {e}", where) from None
    if w <= 0 or h <= 0 or w * h > MAX_PIXELS:
        raise ParseError(f"PPM dimensions {w}x{h} out of range", where)
    if not 0 < maxval < 256:
        raise ParseError(f"unsupported PPM maxval {maxval}", where)
    if i >= len(buf) or not buf[i:i + 1].isspace():
        raise ParseError("missing whitespace after PPM header", where)
    data = buf[i + 1:]
    need = w * h * 3
    if len(data) != need:
        raise ParseError(f"PPM payload has {len(data)} bytes, header implies {need}", where)
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    if maxval != 255:
        img = np.round(img.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return img.copy()


def encode_ppm(img: np.ndarray) -> bytes:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8 pixels, got {arr.shape} {arr.dtype}")
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_ppm(f.read(), str(path))


def write_ppm(path: str | os.PathLike, img: np.ndarray) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_ppm(img))


def load_image(path: str | os.PathLike, height: int, width: int) -> np.ndarray:
    """H x W x 3 floats in [0, 1] at model resolution."""
    return preprocess(read_ppm(path), height, width)
