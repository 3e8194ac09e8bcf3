"""Binary greyscale PGM (P5) reading and writing."""
import re

import numpy as np

_HEADER = re.compile(rb"\s*P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def write_pgm(path, pixels):
    """Write an 8-bit image; ``pixels`` must already be integers in [0, 255]."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {pixels.shape}")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 255:
        raise ValueError("PGM pixels must lie in [0, 255]")
    rows, cols = pixels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (cols, rows))
        f.write(pixels.astype(np.uint8).tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        raw = f.read()
    m = _HEADER.match(raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    cols, rows, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    size = rows * cols * np.dtype(dtype).itemsize
    body = raw[m.end():m.end() + size]
    if len(body) != size:
        raise ValueError(f"{path}: truncated pixel data")
    img = np.frombuffer(body, dtype=dtype).reshape(rows, cols).astype(np.float64)
    if maxval != 255:
        img = img * (255.0 / maxval)
    return img


def rescale_to_bytes(values):
    """Linear map of ``values`` onto [0, 255]; returns ``(pixels, lo, hi)``.

    A constant array maps to 128 everywhere.
    """
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.full(values.shape, 128, dtype=np.uint8), lo, hi
    pix = np.rint((values - lo) / (hi - lo) * 255.0)
    return pix.astype(np.uint8), lo, hi
