"""Minimal NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Supports exactly what the pipeline needs: 3D volumes stored in a
single-file NIfTI-1 container with the common scalar datatypes.
Separate .hdr/.img pairs, NIfTI-2, and orientation handling are out
of scope; voxel spacing is read from pixdim and nothing else of the
affine is interpreted.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype codes -> numpy dtypes
_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


class NiftiError(ValueError):
    """Raised for unreadable or unsupported NIfTI files."""


def _open_for_read(path: Path):
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a single-file NIfTI-1 volume.

    Returns (data, spacing) where data has the file's on-disk dims
    (x-fastest storage order mapped to shape dim[1:1+ndim]) and spacing
    is pixdim[1:4] in mm. Scale slope/intercept are applied when set.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with _open_for_read(path) as f:
            raw = f.read()
    except (OSError, gzip.BadGzipFile) as exc:
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes)")

    sizeof_hdr = struct.unpack("<i", raw[:4])[0]
    if sizeof_hdr == 348:
        bo = "<"
    elif struct.unpack(">i", raw[:4])[0] == 348:
        bo = ">"
    else:
        raise NiftiError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")

    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: two-file .hdr/.img pairs are unsupported")

    dim = struct.unpack(bo + "8h", raw[40:56])
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid ndim {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    datatype = struct.unpack(bo + "h", raw[70:72])[0]
    if datatype not in _DTYPE_CODES:
        raise NiftiError(f"{path}: unsupported datatype code {datatype}")
    dtype = _DTYPE_CODES[datatype].newbyteorder(bo)
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    vox_offset = int(struct.unpack(bo + "f", raw[108:112])[0])
    scl_slope, scl_inter = struct.unpack(bo + "2f", raw[112:120])

    count = int(np.prod(shape))
    end = vox_offset + count * dtype.itemsize
    if len(raw) < end:
        raise NiftiError(f"{path}: truncated data ({len(raw)} < {end} bytes)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or (scl_slope == 1.0 and scl_inter != 0.0):
        data = (data * scl_slope + scl_inter).astype(np.float32)
    else:
        data = np.asarray(data)
    spacing = tuple(float(abs(p)) for p in pixdim[1:4])
    return data, spacing


def write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write an array as a single-file little-endian NIfTI-1 volume.

    Gzip-compresses when the path ends in .gz. mtime is pinned to zero
    so identical arrays produce bit-identical files.
    """
    path = Path(path)
    data = np.asarray(data)
    if data.dtype not in _CODE_FOR_DTYPE:
        raise NiftiError(f"unsupported dtype {data.dtype}")
    if not 1 <= data.ndim <= 7:
        raise NiftiError(f"unsupported ndim {data.ndim}")

    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pixdim = [1.0] + list(spacing[: data.ndim]) + [1.0] * (7 - data.ndim)
    pixdim = pixdim[:8] + [0.0] * (8 - len(pixdim))

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, _CODE_FOR_DTYPE[data.dtype])
    struct.pack_into("<h", header, 72, data.dtype.itemsize * 8)  # bitpix
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<h", header, 252, 0)  # qform_code
    struct.pack_into("<h", header, 254, 1)  # sform_code
    # diagonal affine from spacing, so round-tripped spacing is recoverable
    sx, sy, sz = (list(spacing) + [1.0, 1.0, 1.0])[:3]
    struct.pack_into("<4f", header, 280, sx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", header, 296, 0.0, sy, 0.0, 0.0)
    struct.pack_into("<4f", header, 312, 0.0, 0.0, sz, 0.0)
    header[344:348] = MAGIC_SINGLE

    payload = bytes(header) + b"\x00" * (VOX_OFFSET - HEADER_SIZE)
    payload += np.asfortranarray(data).astype("<" + data.dtype.str[1:]).tobytes(order="F")

    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        with open(path, "wb") as f:
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
