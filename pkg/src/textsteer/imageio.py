"""Binary PGM (P5) / PPM (P6) writers and readers, 8-bit."""
from __future__ import annotations

import numpy as np


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _write(path: str, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(magic + b"\n%d %d\n255\n" % (w, h))
            f.write(arr.tobytes())
    except OSError as e:
        raise OSError(f"cannot write image to {path}: {e.strerror}") from e


def write_pgm(path: str, gray: np.ndarray) -> None:
    """Grayscale float image in [0, 1] -> P5."""
    _write(path, b"P5", _to_u8(gray))


def write_ppm(path: str, rgb: np.ndarray) -> None:
    """RGB float image in [0, 1] -> P6."""
    _write(path, b"P6", _to_u8(rgb))


def read_pnm(path: str) -> np.ndarray:
    """Read a binary P5/P6 file back as uint8 ``[H, W]`` or ``[H, W, 3]``."""
    with open(path, "rb") as f:
        raw = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM header in {path}")
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(raw[pos : pos + w * h * ch], dtype=np.uint8)
    return data.reshape((h, w, 3) if ch == 3 else (h, w))
