"""Tensor container formats, label images and seeded random streams.

Binary layouts (all little-endian):

NRDT  ``b"NRDT"``, u8 version (1), u8 dtype code (0=float32, 1=float64),
      u8 ndim, u8 pad, ndim x u32 extents, raw values in row-major order.

NRDB  ``b"NRDB"``, u32 entry count, then per entry a u16 name length, the
      UTF-8 name and an embedded NRDT record.
"""

import hashlib
import io
import struct
from collections import OrderedDict

import numpy as np

IGNORE = 255

TENSOR_MAGIC = b"NRDT"
BUNDLE_MAGIC = b"NRDB"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# class id -> RGB; IGNORE renders black
PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156),
        (190, 153, 153), (153, 153, 153), (250, 170, 30), (220, 220, 0),
        (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60),
        (255, 0, 0), (0, 0, 142), (0, 0, 70), (0, 60, 100),
        (0, 80, 100), (0, 0, 230), (119, 11, 32), (255, 255, 255),
    ],
    dtype=np.uint8,
)


class FormatError(ValueError):
    """Raised when a file does not follow its binary layout."""


# ---------------------------------------------------------------- NRDT / NRDB


def encode_tensor(t):
    """Serialize an array into NRDT bytes."""
    t = np.asarray(t)
    dtype = t.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {t.dtype}; expected float32 or float64")
    if t.ndim > 255:
        raise FormatError("too many dimensions")
    for n in t.shape:
        if n > 0xFFFFFFFF:
            raise FormatError(f"extent {n} does not fit in u32")
    header = TENSOR_MAGIC + struct.pack("<BBBB", VERSION, _DTYPE_CODES[dtype], t.ndim, 0)
    header += struct.pack(f"<{t.ndim}I", *t.shape)
    return header + np.ascontiguousarray(t, dtype=dtype).tobytes()


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def decode_tensor(f):
    """Read one NRDT record from a binary stream."""
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad magic, expected NRDT")
    version, code, ndim, _ = struct.unpack("<BBBB", _read_exact(f, 4))
    if version != VERSION:
        raise FormatError(f"unsupported NRDT version {version}")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _CODE_DTYPES[code]
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
    count = 1
    for n in shape:
        count *= n
    nbytes = count * dtype.itemsize
    if nbytes > 1 << 40:
        raise FormatError("extent overflow")
    data = _read_exact(f, nbytes)
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def tensor_write(t, path):
    with open(path, "wb") as f:
        f.write(encode_tensor(t))


def tensor_read(path):
    with open(path, "rb") as f:
        t = decode_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after tensor")
    return t


def encode_bundle(entries):
    items = list(entries.items()) if hasattr(entries, "items") else list(entries)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ValueError("bundle names must be unique")
    out = io.BytesIO()
    out.write(BUNDLE_MAGIC + struct.pack("<I", len(items)))
    for name, t in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"name too long: {name[:40]}...")
        out.write(struct.pack("<H", len(raw)) + raw)
        out.write(encode_tensor(t))
    return out.getvalue()


def bundle_write(entries, path):
    """Write an ordered name -> array mapping (or pair list) as NRDB."""
    data = encode_bundle(entries)
    with open(path, "wb") as f:
        f.write(data)


def bundle_read(path):
    """Read an NRDB file into an OrderedDict, preserving entry order."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != BUNDLE_MAGIC:
            raise FormatError("bad magic, expected NRDB")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        out = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, n).decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate entry {name!r}")
            out[name] = decode_tensor(f)
        if f.read(1):
            raise FormatError("trailing bytes after bundle")
    return out


def text_to_tensor(s):
    """Store UTF-8 text as a float32 byte vector (NRDT has no byte dtype)."""
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def tensor_to_text(t):
    return np.asarray(t).astype(np.uint8).tobytes().decode("utf-8")


# ----------------------------------------------------------------- PGM / PPM


def _check_labels(labels):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("class ids above 255 are unsupported by PGM")
    return labels.astype(np.uint8)


def pgm_write(labels, path):
    labels = _check_labels(labels)
    h, w = labels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(labels.tobytes())


def _read_netpbm(path, magic):
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("malformed header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != magic:
        raise FormatError(f"expected {magic.decode()} header, got {tokens[0][:8]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed header") from None
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    return w, h, data[pos:]


def pgm_read(path):
    """Read a binary P5 label map into a uint8 array."""
    w, h, body = _read_netpbm(path, b"P5")
    if len(body) != w * h:
        raise FormatError("truncated PGM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def colorize(labels, palette=PALETTE):
    labels = _check_labels(labels)
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    valid = labels != IGNORE
    if np.any(labels[valid] >= len(palette)):
        raise ValueError("class id outside the palette")
    rgb[valid] = palette[labels[valid]]
    return rgb


def ppm_color_write(labels, path, palette=PALETTE):
    rgb = colorize(labels, palette)
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def ppm_read(path):
    w, h, body = _read_netpbm(path, b"P6")
    if len(body) != w * h * 3:
        raise FormatError("truncated PPM body")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# ----------------------------------------------------------------------- RNG


def _name_words(name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return list(struct.unpack("<4I", digest[:16]))


def seeded_rng(seed, name=""):
    """PCG64 stream for ``(seed, name)``.

    Streams with different names are statistically independent, so drawing
    from the ``data`` stream never shifts the ``init`` stream.
    """
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    entropy = [seed & 0xFFFFFFFF, seed >> 32] + _name_words(name)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def rand_uniform(rng, shape, lo=0.0, hi=1.0, dtype=np.float32):
    return rng.uniform(lo, hi, size=tuple(shape)).astype(dtype)


def rand_normal(rng, shape, mean=0.0, std=1.0, dtype=np.float32):
    z = rng.standard_normal(size=tuple(shape))
    return (mean + std * z).astype(dtype)
