"""Binary tensor files (``.camt``) and 8-bit netpbm images (PGM in, PPM out)."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from camkit.errors import ImageFormatError, TensorFormatError

TENSOR_MAGIC = b"CAMT"
TENSOR_VERSION = 1
MAX_RANK = 5


def tensor_to_bytes(t) -> bytes:
    t = np.asarray(t, dtype="<f4")
    if not 1 <= t.ndim <= MAX_RANK:
        raise TensorFormatError(f"tensor rank {t.ndim} outside 1..{MAX_RANK}")
    head = TENSOR_MAGIC + struct.pack("<IB", TENSOR_VERSION, t.ndim)
    head += struct.pack(f"<{t.ndim}I", *t.shape)
    return head + np.ascontiguousarray(t).tobytes()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if len(raw) < 9:
        raise TensorFormatError(f"file too short for header ({len(raw)} bytes)", len(raw))
    if raw[:4] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {raw[:4]!r}, expected {TENSOR_MAGIC!r}", 0)
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported tensor file version {version}", 4)
    rank = raw[8]
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"tensor rank {rank} outside 1..{MAX_RANK}", 8)
    data_start = 9 + 4 * rank
    if len(raw) < data_start:
        raise TensorFormatError(f"truncated shape: need {data_start} header bytes", len(raw))
    dims = struct.unpack_from(f"<{rank}I", raw, 9)
    if min(dims) < 1:
        raise TensorFormatError(f"dimensions must be positive, got {dims}", 9)
    expected = 4 * int(np.prod(dims))
    actual = len(raw) - data_start
    if actual != expected:
        raise TensorFormatError(
            f"payload length mismatch: expected {expected} bytes, got {actual}", data_start
        )
    data = np.frombuffer(raw, dtype="<f4", offset=data_start)
    return data.reshape(dims).astype(np.float32)


def write_tensor(t, path) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def _netpbm_header(raw, magic, path):
    """Parse ``magic W H MAXVAL`` (comments allowed); returns (w, h, maxval, data offset)."""
    if raw[:2] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} netpbm file, got {raw[:2]!r}", 0)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: malformed header", start)
        fields.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: missing whitespace after header", pos)
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (only 255)", pos)
    return width, height, pos + 1


def read_image_pgm(path) -> np.ndarray:
    """Binary PGM (P5, maxval 255) as a ``(1, H, W)`` tensor scaled to ``[0, 1]``."""
    raw = Path(path).read_bytes()
    w, h, start = _netpbm_header(raw, b"P5", path)
    if len(raw) - start < w * h:
        raise ImageFormatError(f"{path}: expected {w * h} pixel bytes, got {len(raw) - start}", start)
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=start)
    return (pixels.reshape(1, h, w) / 255.0).astype(np.float32)


def write_image_pgm(gray, path) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim == 3 and gray.shape[0] == 1:
        gray = gray[0]
    h, w = gray.shape
    Path(path).write_bytes(f"P5 {w} {h} 255\n".encode() + gray.tobytes())


def write_image_ppm(rgb, path) -> None:
    """Write an ``(H, W, 3)`` uint8 raster as binary PPM (P6)."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ImageFormatError(f"expected (H, W, 3) uint8 raster, got {rgb.shape} {rgb.dtype}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6 {w} {h} 255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def read_image_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, start = _netpbm_header(raw, b"P6", path)
    if len(raw) - start < 3 * w * h:
        raise ImageFormatError(f"{path}: truncated raster", start)
    return np.frombuffer(raw, dtype=np.uint8, count=3 * w * h, offset=start).reshape(h, w, 3).copy()


def read_input(path) -> np.ndarray:
    """Load a model input: ``.pgm`` images or ``.camt`` tensors."""
    path = Path(path)
    if path.suffix == ".pgm":
        return read_image_pgm(path)
    if path.suffix == ".camt":
        return read_tensor(path)
    raise ImageFormatError(f"{path}: unsupported input extension {path.suffix!r}")
