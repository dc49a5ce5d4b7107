"""PGM (portable graymap) reading and writing, P2 ASCII and P5 binary.

The only image interchange format of the package: maxval 255, grayscale.
``parse(rasterize(x)) == x`` bit-exactly for any canvas of 0..255 levels.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def rasterize(levels, binary=True):
    """Encode a 2-d uint8 level array as PGM bytes (P5 by default)."""
    arr = np.asarray(levels)
    if arr.ndim != 2:
        raise DataError(f"canvas must be 2-d, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise DataError("canvas levels outside [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    if binary:
        return b"P5\n%d %d\n255\n" % (w, h) + arr.tobytes()
    lines = [b"P2", b"%d %d" % (w, h), b"255"]
    for row in arr:
        lines.append(" ".join(str(int(v)) for v in row).encode("ascii"))
    return b"\n".join(lines) + b"\n"


def _tokens_with_comments(data):
    """Yield whitespace-separated tokens, skipping # comments to end of line."""
    i = 0
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            while i < n and data[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < n and data[j : j + 1] not in b" \t\r\n#":
                j += 1
            yield data[i:j], j
            i = j


def parse(data, expected_size=None):
    """Decode PGM bytes to a float64 [0,1] pixel array (row-major).

    ``expected_size`` enforces a square width==height==size image when given.
    """
    if not isinstance(data, (bytes, bytearray)):
        raise DataError("pgm parser expects bytes")
    tokens = _tokens_with_comments(bytes(data))
    try:
        magic, _ = next(tokens)
    except StopIteration:
        raise DataError("empty pgm data") from None
    if magic not in (b"P2", b"P5"):
        raise DataError(f"unsupported magic {magic!r}; need P2 or P5")
    try:
        (w_tok, _), (h_tok, _), (maxval_tok, after_maxval) = next(tokens), next(tokens), next(tokens)
        width, height, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except (StopIteration, ValueError):
        raise DataError("malformed pgm header") from None
    if maxval != 255:
        raise DataError(f"maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise DataError(f"bad dimensions {width}x{height}")
    if expected_size is not None and (width, height) != (expected_size, expected_size):
        raise DataError(f"expected {expected_size}x{expected_size} image, got {width}x{height}")

    if magic == b"P5":
        start = after_maxval + 1  # single whitespace byte after maxval
        payload = bytes(data)[start : start + width * height]
        if len(payload) != width * height:
            raise DataError(f"p5 payload truncated: {len(payload)} of {width * height} bytes")
        levels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    else:
        values = []
        for tok, _ in tokens:
            try:
                values.append(int(tok))
            except ValueError:
                raise DataError(f"non-numeric pixel token {tok!r}") from None
        if len(values) != width * height:
            raise DataError(f"p2 payload has {len(values)} values, expected {width * height}")
        levels = np.array(values, dtype=np.int64).reshape(height, width)
        if levels.min() < 0 or levels.max() > 255:
            raise DataError("p2 pixel outside [0, 255]")
        levels = levels.astype(np.uint8)
    return levels.astype(np.float64) / 255.0


def to_levels(pixels):
    """Map [0,1] float pixels back to 0..255 levels (round to nearest)."""
    arr = np.asarray(pixels, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
