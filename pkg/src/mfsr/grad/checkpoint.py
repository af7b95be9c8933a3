"""Named-array checkpoint archive.

Layout: a UTF-8 header with one line per array

    <name> <shape> <dtype> <byte_offset>

where shape is comma-joined ("-" for 0-d), dtype is f32 or f64, and
byte_offset counts from the first payload byte.  A single blank line
separates the header from the concatenated little-endian row-major
payloads.  Round-trips are bit exact.
"""

from __future__ import annotations

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _shape_token(shape):
    return ",".join(str(d) for d in shape) if shape else "-"


def _parse_shape(token):
    return () if token == "-" else tuple(int(d) for d in token.split(","))


def save_arrays(path, arrays):
    """Write ``{name: ndarray}`` to ``path``; insertion order is preserved."""
    header_lines = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"array name {name!r} must be non-empty and whitespace-free")
        arr = np.asarray(arr)
        if arr.dtype not in _NAMES:
            raise ValueError(f"{name}: unsupported dtype {arr.dtype}, use float32 or float64")
        wire = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        header_lines.append(f"{name} {_shape_token(arr.shape)} {_NAMES[arr.dtype]} {offset}")
        payloads.append(wire.tobytes())
        offset += wire.nbytes
    blob = ("\n".join(header_lines) + "\n\n").encode("utf-8") + b"".join(payloads)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_arrays(path):
    """Read an archive back into ``{name: ndarray}`` (native byte order)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    sep = blob.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: missing header/payload separator")
    payload = blob[sep + 2 :]
    out = {}
    for line in blob[:sep].decode("utf-8").splitlines():
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"{path}: malformed header line {line!r}")
        name, shape_tok, dtype_tok, off_tok = parts
        if dtype_tok not in _DTYPES:
            raise ValueError(f"{path}: unknown dtype {dtype_tok!r} for {name}")
        shape = _parse_shape(shape_tok)
        dtype = _DTYPES[dtype_tok]
        offset = int(off_tok)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if shape else dtype.itemsize
        raw = payload[offset : offset + nbytes]
        if len(raw) != nbytes:
            raise ValueError(f"{path}: payload truncated for {name}")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        out[name] = arr
    return out
