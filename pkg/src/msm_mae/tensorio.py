"""Named-tensor container used for checkpoints, spectrogram caches and embeddings.

Layout (all integers unsigned 32-bit little-endian)::

    b"MSMM" | version | entry count
    per entry: name byte length | UTF-8 name | rank | dims[rank] | float32 LE data
"""

import struct

import numpy as np

MAGIC = b"MSMM"
VERSION = 1


class TensorFileError(ValueError):
    pass


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data):
    if data[:4] != MAGIC:
        raise TensorFileError("not a checkpoint (bad magic)")
    mv = memoryview(data)
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(mv):
            raise TensorFileError("truncated tensor file")
        out = mv[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        out[name] = arr.astype(np.float32)
    if pos != len(mv):
        raise TensorFileError("trailing bytes after last tensor")
    return out


def save_tensors(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load_tensors(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
