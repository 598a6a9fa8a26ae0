"""NetPBM writers: PGM (P2 plain / P5 raw) and PPM (P3 plain / P6 raw).

Written by hand so the package needs no image library; output is a pure
function of the pixel array, the format flag, and the comment lines,
which is what makes image emission byte-reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError


def _check_comments(comments) -> list[str]:
    out = []
    for c in comments:
        if "\n" in c:
            raise DomainError("comment lines must not contain newlines")
        out.append(f"# {c}")
    return out


def _as_uint8(pixels: np.ndarray, ndim: int) -> np.ndarray:
    arr = np.asarray(pixels)
    if arr.ndim != ndim:
        raise DimensionError(f"expected rank {ndim} pixel array, got {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise DomainError("pixel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def write_pgm(pixels: np.ndarray, raw: bool = True, comments=()) -> bytes:
    """Grayscale image; pixels is (height, width) with values in 0..255."""
    arr = _as_uint8(pixels, 2)
    h, w = arr.shape
    head = [("P5" if raw else "P2"), *_check_comments(comments), f"{w} {h}", "255"]
    header = ("\n".join(head) + "\n").encode("ascii")
    if raw:
        return header + arr.tobytes()
    body = "\n".join(" ".join(str(v) for v in row) for row in arr)
    return header + (body + "\n").encode("ascii")


def write_ppm(pixels: np.ndarray, raw: bool = True, comments=()) -> bytes:
    """RGB image; pixels is (height, width, 3) with values in 0..255."""
    arr = _as_uint8(pixels, 3)
    if arr.shape[2] != 3:
        raise DimensionError(f"PPM needs 3 channels, got {arr.shape[2]}")
    h, w = arr.shape[:2]
    head = [("P6" if raw else "P3"), *_check_comments(comments), f"{w} {h}", "255"]
    header = ("\n".join(head) + "\n").encode("ascii")
    if raw:
        return header + arr.tobytes()
    body = "\n".join(
        " ".join(str(v) for v in row.reshape(-1)) for row in arr
    )
    return header + (body + "\n").encode("ascii")


def read_pgm(data: bytes) -> np.ndarray:
    """Parse P2/P5 back to (height, width) uint8; for round-trip tests."""
    magic, fields, rest = _parse_header(data, n_fields=3)
    w, h, maxval = fields
    if maxval != 255:
        raise DomainError(f"only maxval 255 supported, got {maxval}")
    if magic == b"P5":
        arr = np.frombuffer(rest[: w * h], dtype=np.uint8)
    else:
        arr = np.array(rest.split()[: w * h], dtype=np.uint8)
    if arr.size != w * h:
        raise DimensionError("pixel payload shorter than header promises")
    return arr.reshape(h, w)


def read_ppm(data: bytes) -> np.ndarray:
    """Parse P3/P6 back to (height, width, 3) uint8."""
    magic, fields, rest = _parse_header(data, n_fields=3)
    w, h, maxval = fields
    if maxval != 255:
        raise DomainError(f"only maxval 255 supported, got {maxval}")
    n = w * h * 3
    if magic == b"P6":
        arr = np.frombuffer(rest[:n], dtype=np.uint8)
    else:
        arr = np.array(rest.split()[:n], dtype=np.uint8)
    if arr.size != n:
        raise DimensionError("pixel payload shorter than header promises")
    return arr.reshape(h, w, 3)


def _parse_header(data: bytes, n_fields: int):
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise DomainError(f"not a supported NetPBM payload: {magic!r}")
    pos = 2
    fields = []
    while len(fields) < n_fields:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte after maxval
    return magic, fields, data[pos:]
