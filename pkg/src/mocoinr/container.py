"""Single-file container: fixed preamble, JSON header, raw little-endian blobs.

Layout::

    offset  size  content
    0       4     magic (b"KTDS" for datasets, b"MCKP" for checkpoints)
    4       4     uint32 LE format version
    8       8     uint64 LE header length n
    16      n     UTF-8 JSON header (sorted keys, compact separators)
    16+n    ...   payload: blobs back to back, no padding

The header carries ``meta`` (free-form JSON), ``fields`` (one entry per blob:
name, dtype string, shape, offset, nbytes; offsets are relative to the start
of the payload), ``payload_nbytes`` and ``payload_sha256``. Dtype strings are
numpy's explicit-endian codes (``<c8`` is interleaved float32 real/imag).
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile

import numpy as np

from .errors import ChecksumError, FormatVersionError

VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")
_ALLOWED = {"<c8", "<c16", "<f4", "<f8", "|u1", "<i8"}


def _canonical_dtype(arr):
    dt = arr.dtype
    if dt == np.bool_:
        return "|u1"
    code = dt.newbyteorder("<").str if dt.byteorder not in ("|",) else dt.str
    if code not in _ALLOWED:
        raise TypeError(f"unsupported dtype {dt} for container blob")
    return code


def dumps(magic, meta, arrays):
    fields = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _canonical_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(code)).tobytes()
        fields.append({"name": name, "dtype": code, "shape": list(arr.shape),
                       "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    header = {
        "meta": meta,
        "fields": fields,
        "payload_nbytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREAMBLE.pack(magic, VERSION, len(hbytes)) + hbytes + payload


def loads(buf, magic):
    if len(buf) < _PREAMBLE.size:
        raise ChecksumError("file shorter than the container preamble")
    got_magic, version, hlen = _PREAMBLE.unpack_from(buf, 0)
    if got_magic != magic:
        raise FormatVersionError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatVersionError(f"unsupported container version {version}")
    start = _PREAMBLE.size
    if len(buf) < start + hlen:
        raise ChecksumError("truncated header")
    try:
        header = json.loads(buf[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"corrupt header: {exc}") from None
    payload = buf[start + hlen:]
    if len(payload) != header["payload_nbytes"]:
        raise ChecksumError(
            f"payload is {len(payload)} bytes, header declares {header['payload_nbytes']}"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ChecksumError("payload sha256 mismatch")
    arrays = {}
    for f in header["fields"]:
        raw = payload[f["offset"]:f["offset"] + f["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(f["dtype"])).reshape(f["shape"]).copy()
        arrays[f["name"]] = arr
    return header["meta"], arrays


def atomic_write(path, data):
    """Write bytes via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write(path, magic, meta, arrays):
    atomic_write(path, dumps(magic, meta, arrays))


def read(path, magic):
    with open(path, "rb") as fh:
        return loads(fh.read(), magic)


def payload_digest(path):
    """sha256 recorded in the header, usable as a stable dataset id."""
    with open(path, "rb") as fh:
        buf = fh.read(_PREAMBLE.size)
        _, _, hlen = _PREAMBLE.unpack(buf)
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header["payload_sha256"]
