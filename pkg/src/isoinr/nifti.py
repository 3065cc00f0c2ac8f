"""Minimal single-file NIfTI-1 reader/writer.

Supported subset: little-endian, 3-D, datatypes uint8 / int16 / float32,
geometry from the sform (or an identity default when no transform is set).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import NiftiError
from .volume import LabelVolume, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16
_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4")}
_INT16_MIN, _INT16_MAX = -32768, 32767


def _header_bytes(dims, pixdim, datatype, affine, descrip=b"isoinr") -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    hdr[38] = ord("r")  # regular
    struct.pack_into("<8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    bitpix = _DTYPES[datatype].itemsize * 8
    struct.pack_into("<hh", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *pixdim, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    hdr[123] = 2  # xyzt_units: mm
    hdr[148:148 + len(descrip)] = descrip[:80]
    struct.pack_into("<hh", hdr, 252, 0, 2)  # qform_code, sform_code (aligned)
    for row in range(3):
        struct.pack_into("<4f", hdr, 280 + 16 * row, *affine[row])
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(v: Volume, path) -> None:
    """Write ``v`` as ``.nii``: float32 for scalar volumes, int16 for labels."""
    if isinstance(v, LabelVolume):
        data = np.asarray(v.data)
        if data.size and (data.min() < _INT16_MIN or data.max() > _INT16_MAX):
            bad = data.max() if data.max() > _INT16_MAX else data.min()
            raise NiftiError(f"label id {int(bad)} outside int16 range")
        datatype, arr = DT_INT16, data.astype("<i2")
    else:
        datatype, arr = DT_FLOAT32, np.asarray(v.data).astype("<f4")
    header = _header_bytes(v.dims, v.spacing, datatype, v.affine)
    payload = np.asfortranarray(arr).tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(b"\x00\x00\x00\x00")  # no extensions
            fh.write(payload)
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc


def read_nifti(path, label_table=None, as_labels: bool | None = None) -> Volume:
    """Read a ``.nii`` file.

    Integer datatypes yield a :class:`LabelVolume` unless ``as_labels`` is
    False; float32 data yields a :class:`Volume` (float32 values).
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        raise NiftiError(f"{path}: malformed header, sizeof_hdr={sizeof_hdr} (expected 348)")
    if raw[344:347] != b"n+1":
        raise NiftiError(f"{path}: magic={raw[344:348]!r}, only single-file n+1 is supported")
    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise NiftiError(f"{path}: dim[0]={dim[0]}, only 3-D volumes are supported")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise NiftiError(f"{path}: invalid dim {dims}")
    datatype, _bitpix = struct.unpack_from("<hh", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiError(f"{path}: unsupported datatype={datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    qform_code, sform_code = struct.unpack_from("<hh", raw, 252)

    spacing = tuple(abs(float(p)) for p in pixdim[1:4])
    if not all(s > 0 for s in spacing):
        raise NiftiError(f"{path}: non-positive pixdim {pixdim[1:4]}")
    if sform_code > 0:
        srow = np.array([struct.unpack_from("<4f", raw, 280 + 16 * r) for r in range(3)], dtype=np.float64)
        direction = srow[:, :3] / np.asarray(spacing)
        origin = tuple(srow[:, 3])
        if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-4):
            raise NiftiError(f"{path}: sform columns are not orthogonal to the pixdim spacing")
    elif qform_code > 0:
        raise NiftiError(f"{path}: qform_code={qform_code} without sform; quaternion geometry is not supported")
    else:
        direction, origin = np.eye(3), (0.0, 0.0, 0.0)

    dtype = _DTYPES[datatype]
    start = int(vox_offset)
    count = int(np.prod(dims))
    end = start + count * dtype.itemsize
    if start < HEADER_SIZE or len(raw) < end:
        raise NiftiError(f"{path}: data section truncated (need {end} bytes, have {len(raw)})")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(dims, order="F")

    integer = datatype != DT_FLOAT32
    if as_labels is None:
        as_labels = integer
    if as_labels:
        if not integer:
            if not np.all(np.mod(arr, 1) == 0):
                raise NiftiError(f"{path}: float data cannot be read as labels")
        return LabelVolume(np.ascontiguousarray(arr).astype(np.int64), spacing, origin, direction, label_table or ())
    data = np.ascontiguousarray(arr).astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = (data * (slope or 1.0) + inter).astype(np.float32)
    return Volume(data, spacing, origin, direction)
