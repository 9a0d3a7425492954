"""Binary PGM (P5) reading and writing.

Label maps are stored as 8-bit PGM with pixel value ``label - 1``; images as
16-bit PGM (big-endian samples, maxval 65535) with intensities in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ccdm.diffusion import LabelMap

IMAGE_MAXVAL = 65535
LABEL_MAXVAL = 255


class PGMFormatError(ValueError):
    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {message}")


def _header_tokens(raw: bytes, path):
    """Yield (token, offset) for the 4 header fields, and the payload start."""
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and (raw[pos:pos + 1].isspace() or raw[pos:pos + 1] == b"#"):
            if raw[pos:pos + 1] == b"#":
                while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PGMFormatError(path, pos, "truncated header")
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((raw[start:pos], start))
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise PGMFormatError(path, pos, "missing whitespace after maxval")
    return tokens, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return the (H, W) integer samples and the maxval."""
    raw = Path(path).read_bytes()
    tokens, start = _header_tokens(raw, path)
    magic, off = tokens[0]
    if magic != b"P5":
        raise PGMFormatError(path, off, f"unsupported magic {magic!r}")
    vals = []
    for tok, off in tokens[1:]:
        if not tok.isdigit():
            raise PGMFormatError(path, off, f"expected a decimal integer, got {tok!r}")
        vals.append(int(tok))
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise PGMFormatError(path, tokens[1][1], "non-positive dimensions")
    if not 0 < maxval < 65536:
        raise PGMFormatError(path, tokens[3][1], f"maxval {maxval} out of range")
    dtype = ">u2" if maxval > 255 else "u1"
    need = width * height * np.dtype(dtype).itemsize
    if len(raw) - start < need:
        raise PGMFormatError(path, len(raw), f"truncated payload: expected {need} bytes "
                                             f"from byte {start}")
    data = np.frombuffer(raw, dtype=dtype, count=width * height, offset=start)
    data = data.reshape(height, width).astype(np.int64)
    if data.max() > maxval:
        bad = int(np.argmax(data.reshape(-1) > maxval))
        raise PGMFormatError(path, start + bad * np.dtype(dtype).itemsize,
                             f"sample exceeds maxval {maxval}")
    return data, maxval


def write_pgm(path, samples: np.ndarray, maxval: int) -> None:
    samples = np.asarray(samples)
    if samples.ndim != 2:
        raise ValueError("PGM samples must be 2-D")
    if samples.min() < 0 or samples.max() > maxval:
        raise ValueError(f"samples outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = samples.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + samples.astype(dtype).tobytes())


def write_label_map(path, lm: LabelMap) -> None:
    if lm.num_classes > LABEL_MAXVAL + 1:
        raise ValueError("too many classes for an 8-bit label map")
    write_pgm(path, lm.labels - 1, LABEL_MAXVAL)


def read_label_map(path, num_classes: int) -> LabelMap:
    data, maxval = read_pgm(path)
    if maxval != LABEL_MAXVAL:
        raise PGMFormatError(path, 0, f"label maps need maxval {LABEL_MAXVAL}, got {maxval}")
    if data.max() >= num_classes:
        flat = int(np.argmax(data.reshape(-1) >= num_classes))
        raw = Path(path).read_bytes()
        offset = len(raw) - data.size + flat
        raise PGMFormatError(path, offset, f"label value {int(data.reshape(-1)[flat])} "
                                           f">= num_classes {num_classes}")
    return LabelMap(data + 1, num_classes)


def quantize_image(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * IMAGE_MAXVAL) / IMAGE_MAXVAL


def write_image(path, image: np.ndarray) -> None:
    """Write a single-channel image with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[0] != 1:
            raise ValueError("only single-channel images can be stored as PGM")
        image = image[0]
    write_pgm(path, np.round(np.clip(image, 0.0, 1.0) * IMAGE_MAXVAL).astype(np.int64), IMAGE_MAXVAL)


def read_image(path) -> np.ndarray:
    """Read a PGM image as a (1, H, W) float array in [0, 1]."""
    data, maxval = read_pgm(path)
    return (data / maxval)[None].astype(np.float64)
