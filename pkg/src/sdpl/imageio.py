"""Netpbm codecs (P2/P3/P5/P6) - the only image formats the package reads."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import MalformedImage


def _tokens(buf: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedImage("truncated header")
        out.append(buf[start:pos])
    return out, pos


def decode(buf: bytes) -> np.ndarray:
    """Decode to uint8/uint16 array [H, W, channels] (channels 1 or 3).

    Samples are rescaled so that ``maxval`` maps to the dtype's full range.
    """
    magic = buf[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise MalformedImage(f"unsupported magic {magic!r}")
    try:
        (w, h, maxval), pos = _tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise MalformedImage(f"bad header: {exc}") from None
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise MalformedImage(f"bad dimensions {w}x{h} maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    if magic in (b"P5", b"P6"):
        pos += 1  # single whitespace byte before raster
        nbytes = count * np.dtype(dtype).itemsize
        raster = buf[pos : pos + nbytes]
        if len(raster) != nbytes:
            raise MalformedImage("truncated raster")
        arr = np.frombuffer(raster, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    else:
        try:
            vals = [int(t) for t in buf[pos:].split()]
        except ValueError:
            raise MalformedImage("non-integer sample in plain raster") from None
        if len(vals) != count:
            raise MalformedImage(f"expected {count} samples, found {len(vals)}")
        if any(v < 0 or v > maxval for v in vals):
            raise MalformedImage("sample outside [0, maxval]")
        arr = np.asarray(vals, dtype=np.uint16 if maxval > 255 else np.uint8)
    if arr.max(initial=0) > maxval:
        raise MalformedImage("sample exceeds maxval")
    full = 255 if maxval < 256 else 65535
    if maxval != full:
        arr = np.rint(arr.astype(np.float64) * full / maxval).astype(arr.dtype)
    return arr.reshape(h, w, channels)


def read(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 from uint8 [H, W, 3]."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm_plain(path, gray: np.ndarray, maxval: int = 255) -> None:
    """Plain-text P2 from an integer [H, W] array."""
    gray = np.asarray(gray, dtype=np.int64)
    h, w = gray.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in gray)
    Path(path).write_text(f"P2\n{w} {h}\n{maxval}\n{rows}\n")


def to_chw_float(arr: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[H, W, c] integer samples -> [3, H, W] floats in [0, 1]."""
    maxval = 255.0 if arr.dtype == np.uint8 else 65535.0
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return (arr.transpose(2, 0, 1).astype(np.float64) / maxval).astype(dtype)


def from_chw_float(img: np.ndarray) -> np.ndarray:
    """[3, H, W] floats in [0, 1] -> uint8 [H, W, 3]."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
