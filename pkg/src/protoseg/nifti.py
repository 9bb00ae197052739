"""Minimal NIfTI-1 volume I/O.

Supports the subset of the format the dataset layout needs: single-file
``.nii`` / ``.nii.gz``, scalar 3D volumes, little- or big-endian headers,
``scl_slope``/``scl_inter`` intensity scaling on read. Data is stored in the
standard NIfTI order (first axis fastest).
"""

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_SIZE = 348
MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def read(path):
    """Read a 3D NIfTI volume.

    Returns (data, spacing): float or integer ndarray of shape (H, W, D) and
    the voxel spacing in mm from pixdim.
    """
    with _open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: truncated NIfTI header")
    (sizeof_hdr,) = struct.unpack("<i", raw[:4])
    bo = "<"
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack(">i", raw[:4])
        if sizeof_hdr != HEADER_SIZE:
            raise DataError(f"{path}: not a NIfTI-1 file")
        bo = ">"
    dim = struct.unpack(bo + "8h", raw[40:56])
    datatype, _bitpix = struct.unpack(bo + "2h", raw[70:74])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(bo + "f", raw[108:112])
    scl_slope, scl_inter = struct.unpack(bo + "2f", raw[112:120])

    ndim = dim[0]
    if ndim < 3 or ndim > 4:
        raise DataError(f"{path}: expected a 3D volume, header says {ndim}D")
    shape = tuple(max(1, d) for d in dim[1:4])
    if ndim == 4 and dim[4] not in (0, 1):
        raise DataError(f"{path}: multi-frame volumes not supported (dim4={dim[4]})")
    if datatype not in _DTYPES:
        raise DataError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(bo)

    offset = int(vox_offset) if vox_offset else HEADER_SIZE + 4
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    # NIfTI stores the first axis fastest
    data = data.reshape(shape, order="F")
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * slope + scl_inter
    else:
        data = np.ascontiguousarray(data.astype(dtype.newbyteorder("=")))
    spacing = tuple(float(abs(p)) if p else 1.0 for p in pixdim[1:4])
    return data, spacing


def write(path, data, spacing=(1.0, 1.0, 1.0)):
    """Write a 3D array as single-file NIfTI-1 (.nii or .nii.gz by suffix)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise DataError(f"can only write 3D volumes, got shape {data.shape}")
    if data.dtype not in _CODES:
        data = data.astype(np.float32)
    code = _CODES[np.dtype(data.dtype)]
    bitpix = data.dtype.itemsize * 8

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<b", hdr, 38, ord("r"))
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, float(HEADER_SIZE + 4))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<b", hdr, 123, 2)  # spatial units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # sform only
    sx, sy, sz = spacing
    struct.pack_into("<4f", hdr, 280, sx, 0, 0, 0)
    struct.pack_into("<4f", hdr, 296, 0, sy, 0, 0)
    struct.pack_into("<4f", hdr, 312, 0, 0, sz, 0)
    hdr[344:348] = MAGIC

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = bytes(hdr) + b"\x00\x00\x00\x00" + data.tobytes(order="F")
    if path.suffix == ".gz":
        # fixed mtime and no embedded filename keep writes byte-identical
        with open(path, "wb") as fh:
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)
