"""Versioned binary container used for every model file.

Layout: magic b"ASRTL", 3-byte kind tag, uint32 version, uint32 header
length, a JSON header listing the array fields in order (name, dtype,
shape) plus free-form metadata, then the raw little-endian arrays in that
same order.
"""

import json
import struct

import numpy as np

MAGIC = b"ASRTL"


class FormatError(ValueError):
    pass


def dump(path, kind, version, arrays, meta=None):
    """Write ``arrays`` (a list of (name, ndarray) pairs, order preserved)."""
    kind = kind.encode("ascii")
    if len(kind) != 3:
        raise ValueError("kind tag must be 3 characters")
    fields = []
    blobs = []
    for name, arr in arrays:
        a = np.asarray(arr)
        dt = a.dtype.newbyteorder("<") if a.dtype.byteorder not in ("|", "<") else a.dtype
        a = np.ascontiguousarray(a, dtype=dt)
        fields.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"fields": fields, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC + kind + struct.pack("<II", version, len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load(path, kind, version):
    """Return (dict name -> array in field order, meta)."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != MAGIC:
        raise FormatError("%s: bad magic" % path)
    got = data[5:8].decode("ascii", "replace")
    if got != kind:
        raise FormatError("%s: expected a %r file, found %r" % (path, kind, got))
    ver, hlen = struct.unpack_from("<II", data, 8)
    if ver != version:
        raise FormatError("%s: unsupported version %d (want %d)" % (path, ver, version))
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    out = {}
    for fld in header["fields"]:
        dt = np.dtype(fld["dtype"])
        n = int(np.prod(fld["shape"], dtype=np.int64))
        out[fld["name"]] = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(fld["shape"]).copy()
        pos += n * dt.itemsize
    if pos != len(data):
        raise FormatError("%s: %d trailing bytes" % (path, len(data) - pos))
    return out, header["meta"]
