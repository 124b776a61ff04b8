"""
Binary checkpoint format.

    b"FSSD" | u32 format version | record*

Each record is: u32 name length, UTF-8 name, u8 dtype tag, u32 rank,
rank × u32 extents, little-endian payload. Records run to end of file.
"""

import os
import struct
from collections import OrderedDict
from typing import Dict

import numpy as np

from errors import CheckpointError

MAGIC = b"FSSD"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    0: np.dtype('<f4'),
    1: np.dtype('<f8'),
    2: np.dtype('<i8'),
}
_TAG_FOR_KIND = {np.dtype('<f4'): 0, np.dtype('<f8'): 1, np.dtype('<i8'): 2}


def _tag_for(array: np.ndarray) -> int:
    dtype = array.dtype.newbyteorder('<')
    if np.issubdtype(dtype, np.integer):
        return 2
    if dtype not in _TAG_FOR_KIND:
        raise CheckpointError(f"unsupported dtype {array.dtype}")
    return _TAG_FOR_KIND[dtype]


def encode(records: Dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack('<I', FORMAT_VERSION)]
    for name, value in records.items():
        array = np.asarray(value)
        tag = _tag_for(array)
        array = np.ascontiguousarray(array, dtype=_DTYPE_TAGS[tag])
        encoded_name = name.encode('utf-8')
        chunks.append(struct.pack('<I', len(encoded_name)))
        chunks.append(encoded_name)
        chunks.append(struct.pack('<BI', tag, array.ndim))
        chunks.append(struct.pack(f'<{array.ndim}I', *array.shape))
        chunks.append(array.tobytes())
    return b''.join(chunks)


def decode(blob: bytes) -> 'OrderedDict[str, np.ndarray]':
    if blob[:4] != MAGIC:
        raise CheckpointError("not an FSSD checkpoint (bad magic bytes)")
    try:
        (version,) = struct.unpack_from('<I', blob, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        offset = 8
        records: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        while offset < len(blob):
            (name_length,) = struct.unpack_from('<I', blob, offset)
            offset += 4
            name = blob[offset:offset + name_length].decode('utf-8')
            offset += name_length
            tag, rank = struct.unpack_from('<BI', blob, offset)
            offset += struct.calcsize('<BI')
            shape = struct.unpack_from(f'<{rank}I', blob, offset)
            offset += 4 * rank
            dtype = _DTYPE_TAGS[tag]
            count = int(np.prod(shape)) if rank else 1
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(blob):
                raise CheckpointError(f"record '{name}' is truncated")
            records[name] = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
            offset += nbytes
        return records
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}")


def save_checkpoint(path: str, records: Dict[str, np.ndarray]):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = path + '.tmp'
    with open(tmp_path, 'wb') as handle:
        handle.write(encode(records))
    os.replace(tmp_path, path)


def load_checkpoint(path: str) -> 'OrderedDict[str, np.ndarray]':
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, 'rb') as handle:
        return decode(handle.read())
