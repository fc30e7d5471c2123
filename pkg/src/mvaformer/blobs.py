"""
Binary containers.

``MVTF`` tensor blob::

    b"MVTF" | version u32 | rank u32 | dims u32 * rank | dtype u8 (0=f32, 1=f64) | values

``MVAF`` multi-view clip::

    b"MVAF" | version u32 | M u32 | T u32 | H u32 | W u32 | M x MVTF blob [T, H, W, 3]

``MVCK`` checkpoint::

    b"MVCK" | version u32 | count u32 | count x (name_len u16 | utf-8 name | MVTF blob)

All integers and values are little-endian; values are row-major.
"""
import io
import struct

import numpy as np

from .errors import FormatError

VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _read_exact(stream, n, what):
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _expect_magic(stream, magic):
    got = _read_exact(stream, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(stream, 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {version}")


def write_tensor(stream, array):
    array = np.asarray(array)
    if array.dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {array.dtype}")
    stream.write(b"MVTF")
    stream.write(struct.pack("<II", VERSION, array.ndim))
    stream.write(struct.pack(f"<{array.ndim}I", *array.shape))
    stream.write(struct.pack("<B", _TAGS[array.dtype]))
    stream.write(np.ascontiguousarray(array, dtype=_DTYPES[_TAGS[array.dtype]]).tobytes())


def read_tensor(stream):
    _expect_magic(stream, b"MVTF")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, "rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "dims"))
    (tag,) = struct.unpack("<B", _read_exact(stream, 1, "dtype tag"))
    if tag not in _DTYPES:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = _DTYPES[tag]
    count = int(np.prod(dims, dtype=np.int64))
    raw = _read_exact(stream, count * dtype.itemsize, "tensor values")
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("="), copy=True).reshape(dims)


def tensor_to_bytes(array):
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))


def write_clip(path, videos):
    """Write ``videos`` of shape [M, T, H, W, 3] as an MVAF file."""
    videos = np.asarray(videos)
    if videos.ndim != 5 or videos.shape[-1] != 3:
        raise FormatError(f"clip must be [M, T, H, W, 3], got {videos.shape}")
    m, t, h, w, _ = videos.shape
    with open(path, "wb") as f:
        f.write(b"MVAF")
        f.write(struct.pack("<IIIII", VERSION, m, t, h, w))
        for view in videos:
            write_tensor(f, view)


def read_clip(path):
    with open(path, "rb") as f:
        _expect_magic(f, b"MVAF")
        m, t, h, w = struct.unpack("<IIII", _read_exact(f, 16, "clip header"))
        views = [read_tensor(f) for _ in range(m)]
    for v in views:
        if v.shape != (t, h, w, 3):
            raise FormatError(f"view shape {v.shape} disagrees with header {(t, h, w, 3)}")
    return np.stack(views) if views else np.zeros((0, t, h, w, 3), dtype=np.float32)


def write_checkpoint(path, params):
    """``params`` maps parameter names to arrays; order is preserved."""
    with open(path, "wb") as f:
        f.write(b"MVCK")
        f.write(struct.pack("<II", VERSION, len(params)))
        for name, value in params.items():
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            write_tensor(f, np.asarray(value))


def read_checkpoint(path):
    out = {}
    with open(path, "rb") as f:
        _expect_magic(f, b"MVCK")
        (count,) = struct.unpack("<I", _read_exact(f, 4, "count"))
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, n, "name").decode("utf-8")
            out[name] = read_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after checkpoint")
    return out
