"""
checkpoint.py

Binary checkpoint format:

    magic "RSEGCKPT" | version u32 | epoch u32 | meta_len u32 | meta JSON
    | record_count u32 | records...

Each record is  name_len u16 | name utf-8 | ndim u8 | dims u32 * ndim |
little-endian float32 payload. Records cover every parameter and the
BatchNorm running statistics, in model enumeration order.
"""

import json
import os
import struct

import numpy as np

from .console import setup_logger
from .errors import FormatError

# --- CONFIGURATION ---
MAGIC = b"RSEGCKPT"
VERSION = 1
PAYLOAD_DTYPE = np.dtype("<f4")

logger = setup_logger(__name__)


def save_checkpoint(model, path, epoch=0, metadata=None):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    state = model.state_dict()
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, epoch, len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(state)))
        for name, array in state.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", array.ndim))
            f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE).tobytes())
    os.replace(tmp_path, path)
    logger.debug("wrote %d records to %s", len(state), path)
    return path


class _Reader:
    def __init__(self, blob, path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, size):
        if self.offset + size > len(self.blob):
            raise FormatError(f"truncated checkpoint at byte {self.offset}", path=self.path)
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path):
    """-> (state dict of float32 arrays, epoch, metadata dict)."""
    if not os.path.isfile(path):
        raise FormatError("checkpoint not found", path=path)
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", path=path)
    version, epoch, meta_len = reader.unpack("<III")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path=path)
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"corrupt checkpoint metadata: {e}", path=path) from e
    (count,) = reader.unpack("<I")
    state = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        payload = reader.take(size * PAYLOAD_DTYPE.itemsize)
        state[name] = np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(shape).copy()
    if reader.offset != len(reader.blob):
        raise FormatError("trailing bytes after the last record", path=path)
    return state, epoch, metadata


def load_checkpoint(model, path):
    """Restore parameters and running stats into `model`; returns (epoch, metadata)."""
    state, epoch, metadata = read_checkpoint(path)
    try:
        model.load_state_dict(state)
    except FormatError as e:
        raise FormatError(str(e), path=path) from e
    return epoch, metadata
