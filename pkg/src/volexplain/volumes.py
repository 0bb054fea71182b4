"""Volume files: the raw VVOL container and a strict NIfTI-1 subset.

VVOL layout (little-endian)::

    b"VVOL" | version 0x01 | dtype code (1=int16, 2=float32, 3=float64)
    | d, h, w as uint32 | payload, row-major (last axis fastest)

NIfTI-1 support is limited to single-file ``.nii`` images with
``dim[0] == 3``, datatypes int16/float32/float64, no extensions and no
intensity scaling. Arrays are indexed ``[i, j, k]`` along the file's first,
second and third dimensions (first fastest on disk). Orientation fields are
not interpreted. Anything outside the subset raises
:class:`~volexplain.errors.VolumeFormatError`.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .errors import UnsupportedDatatypeError, VolumeFormatError

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
_VVOL_HEAD = struct.Struct("<4sBB3I")

_VVOL_CODES = {1: "int16", 2: "float32", 3: "float64"}
_VVOL_CODE_OF = {v: k for k, v in _VVOL_CODES.items()}

NIFTI_HEADER_SIZE = 348
NIFTI_DATA_OFFSET = 352
_NIFTI_CODES = {4: "int16", 16: "float32", 64: "float64"}
_NIFTI_CODE_OF = {v: k for k, v in _NIFTI_CODES.items()}
_NIFTI_NAMES = {2: "uint8", 8: "int32", 32: "complex64", 128: "rgb24", 256: "int8", 512: "uint16", 768: "uint32", 1024: "int64"}

DTYPES = ("int16", "float32", "float64")


@dataclass(frozen=True)
class VolumeFile:
    dims: tuple[int, int, int]
    dtype: str
    data: np.ndarray  # native dtype, shape == dims


def _format_of(path) -> str:
    name = os.fspath(path).lower()
    if name.endswith(".nii.gz"):
        raise VolumeFormatError(f"{path}: compressed NIfTI is not supported")
    if name.endswith(".nii"):
        return "nifti"
    if name.endswith(".vvol"):
        return "vvol"
    raise VolumeFormatError(f"{path}: cannot infer format from extension (use .vvol or .nii)")


def _cast(arr: np.ndarray, dtype: str) -> np.ndarray:
    if dtype not in DTYPES:
        raise UnsupportedDatatypeError(f"unsupported dtype {dtype!r}; expected one of {DTYPES}")
    if dtype == "int16":
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise VolumeFormatError("int16 output requires integer-valued voxels")
        if arr.size and (arr.min() < -32768 or arr.max() > 32767):
            raise VolumeFormatError("voxel values exceed the int16 range")
    return arr.astype(np.dtype(dtype).newbyteorder("<"))


def _check_dims(arr: np.ndarray) -> None:
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise VolumeFormatError(f"volumes must be 3-D with positive extents, got shape {arr.shape}")


# ---------------------------------------------------------------------------
# VVOL


def encode_vvol(arr, dtype: str = "float64") -> bytes:
    arr = np.asarray(arr)
    _check_dims(arr)
    payload = _cast(arr, dtype).tobytes(order="C")
    return _VVOL_HEAD.pack(VVOL_MAGIC, VVOL_VERSION, _VVOL_CODE_OF[dtype], *arr.shape) + payload


def decode_vvol(data: bytes, source="<bytes>") -> VolumeFile:
    if len(data) < _VVOL_HEAD.size:
        raise VolumeFormatError(f"{source}: file too short for a VVOL header")
    magic, version, code, d, h, w = _VVOL_HEAD.unpack_from(data)
    if magic != VVOL_MAGIC:
        raise VolumeFormatError(f"{source}: bad magic {magic!r}, expected {VVOL_MAGIC!r}")
    if version != VVOL_VERSION:
        raise VolumeFormatError(f"{source}: unsupported VVOL version {version}")
    if code not in _VVOL_CODES:
        raise UnsupportedDatatypeError(f"{source}: unsupported VVOL dtype code {code}")
    if min(d, h, w) < 1:
        raise VolumeFormatError(f"{source}: extents must be positive, got {(d, h, w)}")
    dtype = _VVOL_CODES[code]
    expected = d * h * w * np.dtype(dtype).itemsize
    payload = data[_VVOL_HEAD.size :]
    if len(payload) != expected:
        raise VolumeFormatError(f"{source}: size mismatch, header implies {expected} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<")).reshape(d, h, w)
    return VolumeFile((d, h, w), dtype, arr.astype(dtype))


# ---------------------------------------------------------------------------
# NIfTI-1


def encode_nifti(arr, dtype: str = "float64") -> bytes:
    arr = np.asarray(arr)
    _check_dims(arr)
    data = _cast(arr, dtype)
    hdr = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *arr.shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, _NIFTI_CODE_OF[dtype], data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<fff", hdr, 108, float(NIFTI_DATA_OFFSET), 0.0, 0.0)
    hdr[344:348] = b"n+1\0"
    return bytes(hdr) + b"\0\0\0\0" + data.tobytes(order="F")


def decode_nifti(data: bytes, source="<bytes>") -> VolumeFile:
    if len(data) < NIFTI_HEADER_SIZE:
        raise VolumeFormatError(f"{source}: file too short for a NIfTI-1 header ({len(data)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", data, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        if struct.unpack_from(">i", data, 0)[0] == NIFTI_HEADER_SIZE:
            raise VolumeFormatError(f"{source}: big-endian NIfTI is not supported")
        raise VolumeFormatError(f"{source}: sizeof_hdr is {sizeof_hdr}, expected 348")
    magic = data[344:348]
    if magic == b"ni1\0":
        raise VolumeFormatError(f"{source}: two-file NIfTI (.hdr/.img) is not supported")
    if magic != b"n+1\0":
        raise VolumeFormatError(f"{source}: bad NIfTI magic {magic!r}, expected b'n+1\\x00'")
    dim = struct.unpack_from("<8h", data, 40)
    if dim[0] != 3:
        raise VolumeFormatError(f"{source}: dim[0] is {dim[0]}, only 3-D volumes are supported")
    dims = tuple(int(n) for n in dim[1:4])
    if min(dims) < 1:
        raise VolumeFormatError(f"{source}: extents must be positive, got {dims}")
    datatype, bitpix = struct.unpack_from("<hh", data, 70)
    if datatype not in _NIFTI_CODES:
        name = _NIFTI_NAMES.get(datatype, "unknown")
        raise UnsupportedDatatypeError(f"{source}: unsupported NIfTI datatype code {datatype} ({name})")
    dtype = _NIFTI_CODES[datatype]
    if bitpix != np.dtype(dtype).itemsize * 8:
        raise VolumeFormatError(f"{source}: bitpix {bitpix} inconsistent with datatype code {datatype}")
    vox_offset, slope, inter = struct.unpack_from("<fff", data, 108)
    if vox_offset < NIFTI_DATA_OFFSET or vox_offset != int(vox_offset):
        raise VolumeFormatError(f"{source}: vox_offset {vox_offset} must be an integer >= 352")
    if slope not in (0.0, 1.0) or (slope != 0.0 and inter != 0.0):
        raise VolumeFormatError(f"{source}: intensity scaling (scl_slope {slope}, scl_inter {inter}) is not supported")
    if len(data) >= 352 and data[348] != 0:
        raise VolumeFormatError(f"{source}: NIfTI header extensions are not supported")
    offset = int(vox_offset)
    expected = int(np.prod(dims)) * np.dtype(dtype).itemsize
    if len(data) != offset + expected:
        raise VolumeFormatError(
            f"{source}: size mismatch, expected {offset + expected} bytes (offset {offset} + payload {expected}), found {len(data)}"
        )
    arr = np.frombuffer(data, dtype=np.dtype(dtype).newbyteorder("<"), count=int(np.prod(dims)), offset=offset)
    return VolumeFile(dims, dtype, arr.reshape(dims, order="F").astype(dtype))


# ---------------------------------------------------------------------------


def load_volume(path) -> VolumeFile:
    """Read a volume in its stored dtype; format is sniffed from content."""
    data = Path(path).read_bytes()
    if data[:4] == VVOL_MAGIC:
        return decode_vvol(data, path)
    if data[:2] == b"\x1f\x8b":
        raise VolumeFormatError(f"{path}: compressed NIfTI is not supported")
    if len(data) >= 4 and (struct.unpack_from("<i", data)[0] == NIFTI_HEADER_SIZE or struct.unpack_from(">i", data)[0] == NIFTI_HEADER_SIZE):
        return decode_nifti(data, path)
    raise VolumeFormatError(f"{path}: unrecognized volume format")


def read_volume(path) -> np.ndarray:
    """Read a volume as a float64 array of shape (d, h, w)."""
    vf = load_volume(path)
    arr = vf.data.astype(np.float64)
    core.check_finite(arr, os.fspath(path))
    return arr


def write_volume(arr, path, format: str | None = None, dtype: str = "float64") -> None:
    fmt = format or _format_of(path)
    if fmt == "vvol":
        blob = encode_vvol(arr, dtype)
    elif fmt == "nifti":
        blob = encode_nifti(arr, dtype)
    else:
        raise VolumeFormatError(f"unknown volume format {fmt!r}")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# attribution maps: float64 VVOL plus a JSON sidecar ``<path>.json``


def map_sidecar(path) -> Path:
    return Path(f"{os.fspath(path)}.json")


def write_map(amap, path, provenance: dict | None = None) -> None:
    write_volume(amap.values, path, format="vvol", dtype="float64")
    meta = {
        "method": amap.method,
        "target_class": amap.target_class,
        "metadata": amap.metadata,
        "provenance": provenance or {},
    }
    with open(map_sidecar(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_map(path):
    from .attribution import AttributionMap

    side = map_sidecar(path)
    if not side.exists():
        raise VolumeFormatError(f"{path}: missing map metadata sidecar {side.name}")
    with open(side, encoding="utf-8") as fh:
        meta = json.load(fh)
    return AttributionMap(read_volume(path), meta["method"], int(meta["target_class"]), meta.get("metadata", {}))
