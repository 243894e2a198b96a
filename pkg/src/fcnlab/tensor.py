"""Dense 4-D tensors, label maps, and their on-disk formats.

Tensors are plain numpy arrays of shape (batch, channel, height, width).
Two little-endian binary formats are used:

``FCNT`` (single tensor)::

    b"FCNT" | u32 version=1 | u32 ndim=4 | u32 dims[4] | f32 payload

``FCNZ`` (named checkpoint)::

    b"FCNZ" | u32 version=1 | u32 count | count * (u16 len | utf-8 name | FCNT record)

Label maps are 2-D uint8 arrays stored as binary PGM (P5, maxval 255).
"""

import io
import struct

import numpy as np

IGNORE = 255

TENSOR_MAGIC = b"FCNT"
CHECKPOINT_MAGIC = b"FCNZ"
FORMAT_VERSION = 1
MAX_ELEMENTS = 1 << 32


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class DimOverflowError(TensorFormatError):
    pass


def as_tensor(x, dtype=np.float32):
    """Coerce `x` to a 4-D array, promoting lower ranks with leading unit axes."""
    a = np.asarray(x, dtype=dtype)
    if a.ndim > 4:
        raise ValueError(f"tensor rank {a.ndim} > 4")
    while a.ndim < 4:
        a = a[np.newaxis]
    return a


def linear_index(dims, b, c, y, x):
    _, C, H, W = dims
    return ((b * C + c) * H + y) * W + x


def crop(t, offset_h, offset_w, out_h, out_w):
    """Spatial window of `t`; batch and channel axes are untouched."""
    H, W = t.shape[2], t.shape[3]
    for axis, off, n, ext in (("height", offset_h, out_h, H), ("width", offset_w, out_w, W)):
        if off < 0 or n < 0 or off + n > ext:
            raise IndexError(
                f"crop window [{off}, {off + n}) out of bounds on {axis} axis (extent {ext})"
            )
    return t[:, :, offset_h:offset_h + out_h, offset_w:offset_w + out_w]


# ---------------------------------------------------------------------------
# FCNT

def _encode_tensor(t):
    t = as_tensor(t)
    if t.size > MAX_ELEMENTS:
        raise DimOverflowError(f"tensor with {t.size} elements exceeds format limit")
    header = TENSOR_MAGIC + struct.pack("<II4I", FORMAT_VERSION, 4, *t.shape)
    return header + np.ascontiguousarray(t, dtype="<f4").tobytes()


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def _decode_tensor(f):
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise BadMagicError(f"bad tensor magic {magic!r}, expected {TENSOR_MAGIC!r}")
    version, ndim = struct.unpack("<II", _read_exact(f, 8, "tensor header"))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported tensor version {version}")
    if ndim != 4:
        raise TensorFormatError(f"unsupported tensor rank {ndim}")
    dims = struct.unpack("<4I", _read_exact(f, 16, "tensor dims"))
    count = 1
    for d in dims:
        count *= d
    if count > MAX_ELEMENTS:
        raise DimOverflowError(f"dims {dims} overflow the element limit")
    payload = _read_exact(f, 4 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tensor(t, path):
    with open(path, "wb") as f:
        f.write(_encode_tensor(t))


def read_tensor(path):
    with open(path, "rb") as f:
        return _decode_tensor(f)


# ---------------------------------------------------------------------------
# FCNZ

def write_checkpoint(named, path):
    """Write name -> tensor pairs; `named` may be a mapping or an iterable of pairs."""
    items = list(named.items()) if hasattr(named, "items") else list(named)
    seen = set()
    for name, _ in items:
        if not name:
            raise ValueError("checkpoint entry names must be nonempty")
        if name in seen:
            raise ValueError(f"duplicate checkpoint entry {name!r}")
        seen.add(name)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(items)))
    for name, t in sorted(items, key=lambda kv: kv[0]):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"checkpoint entry name too long: {name[:32]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(_encode_tensor(t))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path):
    """Read a checkpoint; returns a dict whose iteration order is name-sorted."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise BadMagicError(f"bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version, count = struct.unpack("<II", _read_exact(f, 8, "checkpoint header"))
        if version != FORMAT_VERSION:
            raise TensorFormatError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2, "entry name length"))
            name = _read_exact(f, n, "entry name").decode("utf-8")
            if name in out:
                raise TensorFormatError(f"duplicate checkpoint entry {name!r}")
            out[name] = _decode_tensor(f)
    return dict(sorted(out.items()))


# ---------------------------------------------------------------------------
# label maps

def check_labels(labels, n_cl):
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & ((labels < 0) | (labels >= n_cl))
    if bad.any():
        raise ValueError(f"label {int(labels[bad].flat[0])} out of range for {n_cl} classes")
    return labels


def write_pgm(labels, path):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("label map must be 2-D")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("label values must fit in one byte")
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(labels.astype(np.uint8).tobytes())


def _pgm_tokens(data, count):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P5":
        raise BadMagicError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    (w, h, maxval), pos = _pgm_tokens(data, 3)
    if maxval != 255:
        raise TensorFormatError(f"{path}: maxval {maxval} unsupported, expected 255")
    raster = data[pos:pos + w * h]
    if len(raster) != w * h:
        raise TruncatedError(f"{path}: expected {w * h} pixels, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
