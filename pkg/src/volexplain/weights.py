"""Bit-exact weight files.

Layout::

    b"VXW1"                 4 bytes magic
    0x01                    1 byte version
    header_length           8 bytes, little-endian unsigned
    header                  UTF-8 JSON: network spec, parameter table,
                            payload byte count
    payload                 little-endian float64, layer order,
                            kernels/weights before biases
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import MagicError, SpecMismatchError, TruncatedFileError, VersionError, WeightFileError
from .model import Network, NetworkSpec, param_shapes, spec_from_dict, spec_to_dict

MAGIC = b"VXW1"
VERSION = 1
_PREFIX = struct.Struct("<4sBQ")

# storage order inside a layer
_ORDER = ("kernels", "weights", "bias")


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_weights(net: Network) -> bytes:
    table = []
    chunks = []
    offset = 0
    for i, layer in enumerate(net.params):
        for name in _ORDER:
            if name not in layer:
                continue
            arr = layer[name]
            raw = arr.astype("<f8").tobytes(order="C")
            table.append({"layer": i, "name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
    header = _canonical({"spec": spec_to_dict(net.spec), "params": table, "payload_bytes": offset})
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def save_weights(net: Network, path) -> None:
    data = encode_weights(net)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode_weights(data: bytes, spec: NetworkSpec | None = None) -> Network:
    """Decode a weight file; if ``spec`` is given it must match the file."""
    if len(data) < _PREFIX.size:
        raise TruncatedFileError(f"file is {len(data)} bytes, shorter than the {_PREFIX.size}-byte prefix")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported weight file version {version}, expected {VERSION}")
    start = _PREFIX.size
    if start + header_len > len(data):
        raise TruncatedFileError(f"header declares {header_len} bytes but only {len(data) - start} remain")
    try:
        header = json.loads(data[start : start + header_len].decode("utf-8"))
        file_spec = spec_from_dict(header["spec"])
        table = header["params"]
        payload_bytes = int(header["payload_bytes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"corrupt header: {exc}") from None

    payload = data[start + header_len :]
    if len(payload) != payload_bytes:
        raise TruncatedFileError(f"header declares {payload_bytes} payload bytes, file holds {len(payload)}")

    if spec is not None and spec_to_dict(spec) != spec_to_dict(file_spec):
        raise SpecMismatchError("weight file was written for a different network spec")
    target = spec if spec is not None else file_spec

    expected = param_shapes(target)
    params = [dict() for _ in expected]
    seen = 0
    for entry in table:
        i, name, shape = entry["layer"], entry["name"], tuple(entry["shape"])
        if i >= len(expected) or expected[i].get(name) != shape:
            raise SpecMismatchError(f"parameter table entry layer {i} {name} {shape} does not match the spec")
        count = int(np.prod(shape))
        off = int(entry["offset"])
        if off < 0 or off + 8 * count > payload_bytes:
            raise TruncatedFileError(f"layer {i} {name} extends beyond the payload")
        params[i][name] = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        seen += 1
    if seen != sum(len(p) for p in expected):
        raise SpecMismatchError(f"parameter table lists {seen} tensors, spec needs {sum(len(p) for p in expected)}")
    return Network(target, params)


def load_weights(spec: NetworkSpec | None, path) -> Network:
    with open(path, "rb") as fh:
        return decode_weights(fh.read(), spec)


def read_weights(path) -> Network:
    """Load a weight file using the spec stored inside it."""
    return load_weights(None, path)
