"""Binary volume files (``SMVX``) and checkpoints (``SMCK``).

All integers and values are little-endian.

Volume::

    b"SMVX" | version u16 | dtype u8 (0=f32, 1=u8) | rank u8 | dims u32 * rank | payload

Checkpoint::

    b"SMCK" | version u16 | record count u32 |
    records: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | f32 values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"SMVX"
CHECKPOINT_MAGIC = b"SMCK"
VERSION = 1
MAX_ELEMENTS = 1 << 31

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODE_OF = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated file")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def dims(self, rank: int) -> tuple:
        dims = self.unpack(f"<{rank}I") if rank else ()
        if int(np.prod(dims, dtype=np.int64)) > MAX_ELEMENTS:
            raise FormatError(f"dimensions {dims} exceed the element limit")
        return tuple(dims)


def encode_volume(v: np.ndarray) -> bytes:
    v = np.asarray(v)
    if v.dtype not in _CODE_OF:
        raise FormatError(f"unsupported dtype {v.dtype}; use float32 or uint8")
    code = _CODE_OF[v.dtype]
    head = VOLUME_MAGIC + struct.pack("<HBB", VERSION, code, v.ndim) + struct.pack(f"<{v.ndim}I", *v.shape)
    return head + np.ascontiguousarray(v, dtype=_DTYPE_CODES[code]).tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    if r.take(4) != VOLUME_MAGIC:
        raise FormatError("bad magic, not a volume file")
    version, code, rank = r.unpack("<HBB")
    if version != VERSION:
        raise FormatError(f"unsupported volume version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = r.dims(rank)
    dt = _DTYPE_CODES[code]
    payload = r.take(int(np.prod(dims, dtype=np.int64)) * dt.itemsize)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))


def write_volume(path, v: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(v))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, not a checkpoint")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.dims(rank)
        vals = np.frombuffer(r.take(4 * int(np.prod(dims, dtype=np.int64))), dtype="<f4")
        state[name] = vals.reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise FormatError("trailing bytes after last record")
    return state


def save_checkpoint(path, model) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model.state_dict()))


def load_checkpoint(path, model) -> None:
    model.load_state_dict(decode_checkpoint(Path(path).read_bytes()))
