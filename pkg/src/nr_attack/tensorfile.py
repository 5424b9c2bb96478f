"""Binary tensor container shared by generator weights and UAP deltas.

Layout::

    b"FACPA1\\n"
    <header JSON, one line, UTF-8> b"\\n"
    repeated until EOF:
        u32 name length, name bytes (UTF-8)
        u32 rank, rank x u32 dims
        float32 data, little-endian, row-major

All integers are little-endian.
"""

import json
import struct

import numpy as np

MAGIC = b"FACPA1\n"


class TensorFileError(ValueError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = str(path)


class BadMagicError(TensorFileError):
    pass


class TruncatedFileError(TensorFileError):
    pass


class ParamShapeError(TensorFileError):
    pass


def encode(header, tensors):
    parts = [MAGIC, json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob, path="<bytes>"):
    if not blob.startswith(MAGIC):
        raise BadMagicError(path, "bad magic (not a FACPA1 tensor file)")
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise TruncatedFileError(path, "truncated header")
    try:
        header = json.loads(blob[len(MAGIC) : nl])
    except ValueError as exc:
        raise TensorFileError(path, f"header is not valid JSON ({exc})") from exc
    pos, tensors = nl + 1, {}

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(path, f"truncated {what} at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "tensor name").decode()
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * count, f"data of {name!r}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    return header, tensors


def write(path, header, tensors):
    with open(path, "wb") as f:
        f.write(encode(header, tensors))


def read(path):
    with open(path, "rb") as f:
        return decode(f.read(), path)
