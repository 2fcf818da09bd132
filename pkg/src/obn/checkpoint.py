"""Binary checkpoint files.

Layout (little-endian)::

    b"OBNCKPT1"
    u32  entry count
    per entry:
        u16  name length, then the UTF-8 name
        u8   dtype code
        u8   rank, then rank x u32 extents
        raw array bytes (row-major)
    u32  CRC32 of every preceding byte
"""
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"OBNCKPT1"
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i8"): 3,
    np.dtype("<u8"): 4,
    np.dtype("u1"): 5,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode(entries):
    parts = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        code = DTYPE_CODES.get(np.dtype(dt))
        if code is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=CODE_DTYPES[code]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf):
    if not buf:
        raise FormatError("empty checkpoint file")
    if len(buf) < len(MAGIC) + 8 or buf[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic: not an OBNCKPT1 checkpoint")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    pos = len(MAGIC)
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    out = {}
    for i in range(count):
        label = f"entry #{i}"
        try:
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            if pos + nlen > len(body):
                raise struct.error
            name = body[pos : pos + nlen].decode("utf-8")
            label = f"entry #{i} ({name!r})"
            pos += nlen
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
        except (struct.error, UnicodeDecodeError) as e:
            raise FormatError(f"truncated or corrupt header in {label}") from e
        if code not in CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} in {label}")
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(body):
            raise FormatError(f"truncated array data in {label}: need {nbytes} bytes, "
                              f"{len(body) - pos} remain")
        out[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} unexpected trailing bytes after {count} entries")
    if zlib.crc32(body) != crc:
        raise FormatError("CRC32 mismatch: checkpoint is corrupt")
    return out


def save(entries, path):
    Path(path).write_bytes(encode(entries))


def load(path):
    return decode(Path(path).read_bytes())


def save_checkpoint(trainer, path):
    """Write a :class:`~obn.train.Trainer`'s full resumable state."""
    save(trainer.state_dict(), path)


def load_checkpoint(path):
    """Read a checkpoint into a ``{name: array}`` dict (see ``Trainer.load_state_dict``)."""
    return load(path)
