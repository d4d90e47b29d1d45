"""File formats: HST1 tensors, binary PPM/PGM, canonical JSON and key=value configs."""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .errors import FormatError

MAGIC = b"HST1"
DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<u4"), 3: np.dtype("<f4"), 4: np.dtype("<f8")}
CODES = {dt: code for code, dt in DTYPES.items()}


def encode_tensor(array: np.ndarray) -> bytes:
    """Header (magic, u32 ndim, u32 dims, u8 dtype code) followed by the raw payload."""
    array = np.asarray(array)
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    dt = array.dtype.newbyteorder("<")
    if dt not in CODES:
        raise TypeError(f"unsupported dtype {array.dtype}")
    header = MAGIC + struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape) + struct.pack("<B", CODES[dt])
    return header + np.ascontiguousarray(array, dtype=dt).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < 9 or data[:4] != MAGIC:
        raise FormatError("not an HST1 tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", data, 4)
    off = 8 + 4 * ndim
    if ndim > 16 or len(data) < off + 1:
        raise FormatError("truncated HST1 header")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    code = data[off]
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dt = DTYPES[code]
    n = math.prod(dims)
    payload = data[off + 1:]
    if len(payload) != n * dt.itemsize:
        raise FormatError(f"payload is {len(payload)} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _ppm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i >= len(data):
            raise FormatError("truncated PPM header")
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    return tokens, i + 1  # exactly one whitespace byte precedes the raster


def decode_pnm(data: bytes) -> np.ndarray:
    """Decode binary PPM (P6) to ``(H, W, 3)`` or PGM (P5) to ``(H, W)`` uint8."""
    (magic, w, h, maxval), start = _ppm_tokens(data, 4)
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported PNM type {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError("non-integer PNM header field") from None
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError("only 8-bit PNM images are supported")
    channels = 3 if magic == b"P6" else 1
    payload = data[start:start + w * h * channels]
    if len(payload) != w * h * channels:
        raise FormatError("truncated PNM payload")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def encode_pnm(image: np.ndarray) -> bytes:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"expected (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + image.tobytes()


def read_pnm(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(image))


def _encode(obj: Any, indent: str = "") -> str:
    inner = indent + "  "
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(obj[k], inner)}"
                 for k in sorted(obj, key=str)]
        return "{\n" + ",\n".join(items) + "\n" + indent + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(inner + _encode(v, inner) for v in obj) + "\n" + indent + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise ValueError("non-finite float cannot be serialised")
        return format(float(obj) + 0.0, ".6g")  # folds -0.0 into 0
    if obj is None or isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj: Any) -> str:
    """Sorted-key, two-space-indented JSON with floats printed as ``%.6g``.

    Parsing the output and dumping it again reproduces the same bytes.
    """
    return _encode(obj) + "\n"


def write_json(path, obj: Any) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out
