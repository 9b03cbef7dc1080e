"""Minimal NIfTI-1 single-file reader and writer.

Covers exactly what CT volumes need: voxel grid, (x, y, z) spacing and
the scl_slope/scl_inter intensity scaling.  Orientation information
beyond "the third axis is axial" is ignored.  Files may be plain ``.nii``
or gzip-compressed ``.nii.gz``.
"""

import gzip
import struct

import numpy as np

from .errors import VolumeFormatError, VolumeIOError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIfTI-1 datatype code -> numpy dtype
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
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def _open_maybe_gzip(path, mode):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path):
    """Read a NIfTI-1 file, returning ``(voxels, spacing)``.

    ``voxels`` has shape (nx, ny, nz) with x varying fastest on disk, as
    mandated by the format; ``spacing`` is the (x, y, z) pixdim triple in
    mm.  scl_slope/scl_inter are applied when set.
    """
    try:
        with _open_maybe_gzip(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise VolumeIOError(f"cannot read NIfTI file {path}: {exc}") from exc

    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"{path}: file shorter than a NIfTI-1 header")

    byteorder = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise VolumeFormatError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
        byteorder = ">"

    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise VolumeFormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == MAGIC_PAIR:
        raise VolumeFormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")

    dim = struct.unpack_from(f"{byteorder}8h", raw, 40)
    (datatype,) = struct.unpack_from(f"{byteorder}h", raw, 70)
    pixdim = struct.unpack_from(f"{byteorder}8f", raw, 76)
    (vox_offset,) = struct.unpack_from(f"{byteorder}f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(f"{byteorder}2f", raw, 112)

    ndim = dim[0]
    if ndim < 3:
        raise VolumeFormatError(f"{path}: expected a 3D volume, got dim[0]={ndim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise VolumeFormatError(f"{path}: non-positive dimensions {(nx, ny, nz)}")
    for extra in dim[4 : 1 + ndim]:
        if extra > 1:
            raise VolumeFormatError(f"{path}: >3D volumes are not supported (dim={dim})")

    if datatype not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(byteorder)

    n_vox = nx * ny * nz
    start = int(vox_offset)
    end = start + n_vox * dtype.itemsize
    if end > len(raw):
        raise VolumeFormatError(f"{path}: truncated voxel data")
    voxels = np.frombuffer(raw[start:end], dtype=dtype)
    voxels = voxels.reshape((nx, ny, nz), order="F").astype(dtype.newbyteorder("="))

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        voxels = voxels.astype(np.float64) * slope + scl_inter

    spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
    return voxels, spacing


def write_nifti(path, voxels, spacing):
    """Write a 3D array as a single-file NIfTI-1 volume (int16 or float32)."""
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ValueError(f"expected a 3D array, got shape {voxels.shape}")
    if voxels.dtype not in (np.int16, np.float32):
        voxels = voxels.astype(np.int16) if np.issubdtype(voxels.dtype, np.integer) else voxels.astype(np.float32)

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *voxels.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, _DTYPE_CODES[voxels.dtype])
    struct.pack_into("<h", header, 72, voxels.dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = MAGIC_SINGLE

    payload = bytes(header) + b"\x00\x00\x00\x00" + voxels.astype("<" + voxels.dtype.str[1:]).tobytes(order="F")
    with _open_maybe_gzip(path, "wb") as fh:
        fh.write(payload)
