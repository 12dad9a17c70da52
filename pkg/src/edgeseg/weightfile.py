"""Binary weight container (``.uwnt``).

Layout, all integers little-endian::

    b"UWNT" | u32 version=1 | u32 len | JSON header (utf-8) | u32 tensor count
    per tensor: u16 len | name (utf-8) | u8 dtype | u8 ndim | u32 dims[ndim] | raw data

dtype codes: 0 = float32, 1 = int8, 2 = int32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"UWNT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4")}
CODES = {np.dtype("float32"): 0, np.dtype("int8"): 1, np.dtype("int32"): 2}


class WeightFileError(Exception):
    pass


class BadMagicError(WeightFileError):
    pass


class UnsupportedVersionError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class RecordMismatchError(WeightFileError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = CODES.get(arr.dtype)
        if code is None:
            raise WeightFileError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"truncated {what} at byte {self.pos} (need {n}, have {len(self.buf) - self.pos})")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    (version,) = r.unpack("<I", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version} (this reader handles {VERSION})")
    (hlen,) = r.unpack("<I", "header")
    try:
        header = json.loads(r.take(hlen, "config block").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise RecordMismatchError(f"config block is not valid JSON: {e}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "tensor record")
        name = r.take(nlen, "tensor record").decode()
        code, ndim = r.unpack("<BB", "tensor record")
        if code not in DTYPES:
            raise RecordMismatchError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}I", "tensor record")
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        data = r.take(nbytes, "tensor data")
        tensors[name] = np.frombuffer(data, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise RecordMismatchError(f"{len(buf) - r.pos} trailing bytes after {count} tensors")
    return header, tensors


def write(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, encode(header, tensors))


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def save_weights(model, path) -> None:
    """Save a float :class:`~edgeseg.unet.ModelGraph`."""
    header = {"format": "unet-float", "config": model.config.to_dict()}
    write(path, header, {k: model.params[k] for k in sorted(model.params)})


def load_weights(path):
    """Load a float model, rebuilding its layer graph from the stored config."""
    from .unet import ConfigError, UNetConfig, build, validate

    header, tensors = read(path)
    if header.get("format") != "unet-float":
        raise RecordMismatchError(f"{path}: expected a float U-Net file, found format {header.get('format')!r}")
    model = build(UNetConfig.from_dict(header["config"]), init=False)
    model.params = dict(tensors)
    try:
        validate(model)
    except ConfigError as e:
        raise RecordMismatchError(f"{path}: {e}") from None
    return model


def file_format(path) -> str:
    header, _ = read(path)
    return header.get("format", "")
