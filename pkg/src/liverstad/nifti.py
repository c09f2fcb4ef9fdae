"""Single-file NIfTI-1 reader and writer (``.nii`` and ``.nii.gz``).

Only the header fields needed for 3D scalar volumes are honored: ``dim``,
``pixdim``, ``datatype``, ``scl_slope``/``scl_inter``, ``vox_offset``,
``magic`` and the sform/qform orientation when it is orthogonal.
"""
from __future__ import annotations

import gzip
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    CorruptFileError,
    NiftiFormatError,
    UnsupportedDatatypeError,
    ValidationError,
)
from .volume import LabelMask, VoxelVolume, round_half_away

HEADER_SIZE = 348
VOX_OFFSET = 352

# NIfTI datatype code -> numpy dtype (little endian)
DATATYPES = {
    2: np.dtype("u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    512: np.dtype("<u2"),
}
NAMES = {
    "uint8": 2,
    "int16": 4,
    "int32": 8,
    "float32": 16,
    "float64": 64,
    "uint16": 512,
}


def _open_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"{path}: broken gzip stream ({exc})") from exc
    return raw


def _quaternion_to_matrix(b, c, d):
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])


def _matrix_to_quaternion(rot):
    """Quaternion (b, c, d) and qfac for an orthonormal matrix."""
    rot = np.array(rot, dtype=float)
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        rot[:, 2] = -rot[:, 2]
        qfac = -1.0
    a = 1.0 + rot[0, 0] + rot[1, 1] + rot[2, 2]
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (rot[2, 1] - rot[1, 2]) / a
        c = 0.25 * (rot[0, 2] - rot[2, 0]) / a
        d = 0.25 * (rot[1, 0] - rot[0, 1]) / a
    else:
        xd = 1.0 + rot[0, 0] - (rot[1, 1] + rot[2, 2])
        yd = 1.0 + rot[1, 1] - (rot[0, 0] + rot[2, 2])
        zd = 1.0 + rot[2, 2] - (rot[0, 0] + rot[1, 1])
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (rot[0, 1] + rot[1, 0]) / b
            d = 0.25 * (rot[0, 2] + rot[2, 0]) / b
            a = 0.25 * (rot[2, 1] - rot[1, 2]) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (rot[0, 1] + rot[1, 0]) / c
            d = 0.25 * (rot[1, 2] + rot[2, 1]) / c
            a = 0.25 * (rot[0, 2] - rot[2, 0]) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (rot[0, 2] + rot[2, 0]) / d
            c = 0.25 * (rot[1, 2] + rot[2, 1]) / d
            a = 0.25 * (rot[1, 0] - rot[0, 1]) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return (b, c, d), qfac


def _orientation(hdr, endian, spacing):
    """Direction cosines and origin from sform (preferred) or qform."""
    qform_code, sform_code = struct.unpack_from(endian + "hh", hdr, 252)
    if sform_code > 0:
        srow = np.array(struct.unpack_from(endian + "12f", hdr, 280), dtype=float).reshape(3, 4)
        lin = srow[:, :3]
        norms = np.linalg.norm(lin, axis=0)
        if np.any(norms == 0):
            raise NiftiFormatError("degenerate sform matrix")
        return lin / norms, srow[:, 3]
    if qform_code > 0:
        b, c, d, qx, qy, qz = struct.unpack_from(endian + "6f", hdr, 256)
        rot = _quaternion_to_matrix(b, c, d)
        qfac = struct.unpack_from(endian + "f", hdr, 76)[0]
        if qfac < 0:
            rot[:, 2] = -rot[:, 2]
        return rot, np.array([qx, qy, qz], dtype=float)
    return np.eye(3), np.zeros(3)


def read_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError("file shorter than a NIfTI-1 header")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError("sizeof_hdr is not 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"unsupported magic {magic!r} (only single-file n+1 is read)")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    datatype = struct.unpack_from(endian + "h", raw, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(endian + "3f", raw, 108)
    return {
        "endian": endian,
        "dim": dim,
        "datatype": datatype,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": slope,
        "scl_inter": inter,
    }


def _decode(path):
    raw = _open_bytes(path)
    hdr = read_header(raw)
    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"invalid dim[0] = {ndim}")
    dims = [int(x) for x in hdr["dim"][1:ndim + 1]] + [1] * (3 - min(ndim, 3))
    if any(n < 1 for n in dims):
        raise NiftiFormatError(f"invalid dimensions {dims}")
    if ndim > 3 and any(n > 1 for n in dims[3:]):
        raise NiftiFormatError("only 3D volumes are supported")
    dims = dims[:3]
    if hdr["datatype"] not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {hdr['datatype']} is not supported")
    dtype = DATATYPES[hdr["datatype"]]
    if hdr["endian"] == ">":
        dtype = dtype.newbyteorder(">")
    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise CorruptFileError(f"vox_offset {hdr['vox_offset']} inside the header")
    count = int(np.prod(dims))
    nbytes = count * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise CorruptFileError(
            f"payload truncated: need {nbytes} bytes at offset {offset}, have {max(0, len(raw) - offset)}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims, order="F")
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in hdr["pixdim"][1:4])
    direction, origin = _orientation(raw, hdr["endian"], spacing)
    if not np.allclose(direction.T @ direction, np.eye(3), atol=1e-4):
        raise NiftiFormatError("non-orthogonal affine is not supported")
    if not np.allclose(direction.T @ direction, np.eye(3), rtol=0, atol=1e-12):
        # re-orthonormalize float32 header noise
        u, _, vt = np.linalg.svd(direction)
        direction = u @ vt
    return hdr, data, spacing, tuple(float(o) for o in origin), direction


def read_nifti(path) -> VoxelVolume:
    """Read a 3D NIfTI-1 file into a float32 :class:`VoxelVolume`."""
    hdr, data, spacing, origin, direction = _decode(path)
    values = data.astype(np.float64 if data.dtype.itemsize > 4 else np.float32)
    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope != 0 and np.isfinite(slope) and not (slope == 1 and inter == 0):
        values = values * float(slope) + (float(inter) if np.isfinite(inter) else 0.0)
    return VoxelVolume(values, spacing, origin, direction)


def read_mask(path) -> LabelMask:
    """Read a NIfTI file as a binary mask; any nonzero voxel is foreground."""
    vol = read_nifti(path)
    return LabelMask.on_grid((vol.data != 0).astype(np.uint8), vol.grid)


def _header_bytes(grid, code: int, slope=1.0, inter=0.0) -> bytes:
    hdr = bytearray(VOX_OFFSET)
    dtype = DATATYPES[code]
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    rot = np.asarray(grid.direction)
    (qb, qc, qd), qfac = _matrix_to_quaternion(rot)
    struct.pack_into("<8f", hdr, 76, qfac, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), slope, inter)
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, sec
    struct.pack_into("<hh", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, qb, qc, qd, *grid.origin)
    aff = grid.index_to_world_matrix()
    struct.pack_into("<12f", hdr, 280, *aff[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(volume, path, datatype: str | None = None) -> None:
    """Write a volume or mask as single-file NIfTI-1 (gzip if ``.gz``).

    Masks default to ``uint8``, volumes to ``float32``. Integer outputs are
    rounded half away from zero and must fit the type's range.
    """
    if datatype is None:
        datatype = "uint8" if isinstance(volume, LabelMask) else "float32"
    if datatype not in NAMES:
        raise UnsupportedDatatypeError(f"cannot write datatype {datatype!r}")
    code = NAMES[datatype]
    dtype = DATATYPES[code]
    data = np.asarray(volume.data)
    if dtype.kind in "iu":
        vals = round_half_away(data)
        info = np.iinfo(dtype)
        if vals.size and (vals.min() < info.min or vals.max() > info.max):
            raise ValidationError(f"values [{vals.min()}, {vals.max()}] do not fit {datatype}")
        payload = vals.astype(dtype)
    else:
        payload = data.astype(dtype)
    blob = _header_bytes(volume.grid, code) + payload.tobytes(order="F")
    path = Path(path)
    if path.name.endswith(".gz"):
        # mtime=0 keeps the gzip stream byte-identical across runs
        blob = gzip.compress(blob, mtime=0)
    atomic_write_bytes(path, blob)


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
