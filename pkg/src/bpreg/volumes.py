"""Volume loading and canonical preprocessing.

Raster CT volumes enter as Hounsfield-unit voxel grids with physical
spacing and leave as stacks of 128x128 float slices in [-1, 1] with a
fixed in-plane pixel spacing of 3.5 mm (44.8 cm x 44.8 cm field of view).
"""

import base64
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import nifti
from .errors import VolumeFormatError, VolumeIOError

HU_CLIP_MIN = -1000.0
HU_CLIP_MAX = 1500.0
HU_CENTER = 250.0
HU_HALF_RANGE = 1250.0

TARGET_PIXEL_SPACING_MM = 3.5
TARGET_SIZE = 128

# Anti-alias prefilter reference: sigma=0.8 was tuned for a downsampling
# factor of 0.25, and is scaled inversely with the actual factor.
REFERENCE_DOWNSAMPLING = 0.25
REFERENCE_SIGMA = 0.8


@dataclass
class RawVolume:
    """HU voxel grid with axes (x, y, z-axial) and mm spacing per axis."""

    voxels: np.ndarray
    spacing: tuple  # (x, y, z) in mm/voxel
    source_id: str = ""

    def validate(self):
        if self.voxels.ndim != 3:
            raise VolumeFormatError(f"{self.source_id}: voxels must be 3D, got {self.voxels.ndim}D")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"{self.source_id}: spacing must be three positive values, got {self.spacing}")
        if self.voxels.shape[2] < 2:
            raise VolumeFormatError(f"{self.source_id}: need at least 2 slices, got {self.voxels.shape[2]}")

    @property
    def n_slices(self):
        return self.voxels.shape[2]


@dataclass
class PreprocessedVolume:
    """Canonical model input: (n, 128, 128) float32 slices in [-1, 1]."""

    slices: np.ndarray
    z_spacing: float
    source_id: str = ""
    z_positions: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.z_positions is None:
            self.z_positions = np.arange(self.slices.shape[0]) * float(self.z_spacing)

    @property
    def n_slices(self):
        return self.slices.shape[0]

    @property
    def z_extent_mm(self):
        return (self.n_slices - 1) * self.z_spacing if self.n_slices else 0.0


def load_volume(path, format=None):
    """Load a raster volume from ``.nii``/``.nii.gz`` or the raw-json test format.

    The format is inferred from the suffix when not given.  Voxel values
    are rounded to integer HU; spacing must be positive and the volume
    must hold at least two slices.
    """
    path = str(path)
    if format is None:
        if path.endswith(".nii") or path.endswith(".nii.gz"):
            format = "nifti"
        elif path.endswith(".json"):
            format = "raw-json"
        else:
            raise VolumeFormatError(f"cannot infer volume format from {path!r}")

    if format == "nifti":
        voxels, spacing = nifti.read_nifti(path)
    elif format == "raw-json":
        voxels, spacing = _read_raw_json(path)
    else:
        raise VolumeFormatError(f"unknown volume format {format!r}")

    if np.issubdtype(voxels.dtype, np.floating):
        voxels = np.rint(voxels)
    voxels = np.clip(voxels, -1024, 3071).astype(np.int16)

    vol = RawVolume(voxels=voxels, spacing=tuple(float(s) for s in spacing), source_id=path)
    vol.validate()
    return vol


def _read_raw_json(path):
    """Self-describing JSON test format: header plus base64 voxel payload.

    Required keys: ``dims`` [nx, ny, nz], ``spacing`` [sx, sy, sz],
    ``dtype`` (numpy name, little-endian), and either ``data_b64`` (C-order
    bytes of the (x, y, z) array) or ``data`` (nested lists).
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise VolumeIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: invalid JSON: {exc}") from exc

    try:
        dims = [int(d) for d in doc["dims"]]
        spacing = [float(s) for s in doc["spacing"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: missing or malformed dims/spacing") from exc
    if len(dims) != 3 or len(spacing) != 3:
        raise VolumeFormatError(f"{path}: dims and spacing must have three entries")

    dtype = np.dtype(doc.get("dtype", "int16")).newbyteorder("<")
    if "data_b64" in doc:
        buf = base64.b64decode(doc["data_b64"])
        expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
        if len(buf) != expected:
            raise VolumeFormatError(f"{path}: payload holds {len(buf)} bytes, expected {expected}")
        voxels = np.frombuffer(buf, dtype=dtype).reshape(dims)
    elif "data" in doc:
        voxels = np.asarray(doc["data"], dtype=dtype)
        if list(voxels.shape) != dims:
            raise VolumeFormatError(f"{path}: data shape {voxels.shape} does not match dims {dims}")
    else:
        raise VolumeFormatError(f"{path}: neither data_b64 nor data present")
    return voxels.astype(dtype.newbyteorder("=")), spacing


def write_raw_json(path, voxels, spacing):
    """Write a raw-json volume (inverse of the raw-json branch of load_volume)."""
    voxels = np.ascontiguousarray(np.asarray(voxels, dtype=np.int16))
    doc = {
        "dims": list(voxels.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": "int16",
        "data_b64": base64.b64encode(voxels.astype("<i2").tobytes()).decode("ascii"),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def hu_to_model_range(values):
    """Clip HU to [-1000, 1500] and map linearly onto [-1, 1]."""
    clipped = np.clip(values, HU_CLIP_MIN, HU_CLIP_MAX)
    return (clipped - HU_CENTER) / HU_HALF_RANGE


def prefilter_sigma(factor):
    """Anti-alias sigma for a given downsampling factor, scaled from the
    (factor 0.25, sigma 0.8) reference point."""
    return REFERENCE_DOWNSAMPLING * REFERENCE_SIGMA / factor


def _resample_axis_coords(n_in, factor):
    # factor = original_spacing / target_spacing; output samples sit at
    # exact multiples of the target spacing, origin at voxel 0.
    n_out = max(1, int(round(n_in * factor)))
    return np.arange(n_out) / factor


def _resample_plane(slices, spacing_xy):
    """Resample (n, ny, nx) normalized slices to the 3.5 mm grid, bilinear."""
    factors = [s / TARGET_PIXEL_SPACING_MM for s in spacing_xy]
    if all(abs(f - 1.0) < 1e-12 for f in factors):
        return slices

    filtered = slices
    for axis, f in enumerate(factors):
        if f < 1.0:  # decimating: anti-alias prefilter; upsampling needs none
            filtered = ndimage.gaussian_filter1d(filtered, prefilter_sigma(f), axis=axis + 1, mode="reflect")

    coords_y = _resample_axis_coords(slices.shape[1], factors[0])
    coords_x = _resample_axis_coords(slices.shape[2], factors[1])
    out = np.empty((slices.shape[0], len(coords_y), len(coords_x)), dtype=np.float32)
    grid = np.meshgrid(coords_y, coords_x, indexing="ij")
    for i in range(slices.shape[0]):
        out[i] = ndimage.map_coordinates(filtered[i], grid, order=1, mode="nearest")
    return out


def _pad_or_crop(slices, size=TARGET_SIZE):
    """Center pad with zeros / center crop; odd residuals go to the high-index side."""
    out = slices
    for axis in (1, 2):
        n = out.shape[axis]
        if n > size:
            start = (n - size) // 2
            out = np.take(out, np.arange(start, start + size), axis=axis)
        elif n < size:
            total = size - n
            low = total // 2
            pad = [(0, 0)] * 3
            pad[axis] = (low, total - low)
            out = np.pad(out, pad, mode="constant", constant_values=0.0)
    return out


def preprocess_volume(volume: RawVolume) -> PreprocessedVolume:
    """Map a raw HU volume into the canonical slice representation.

    Value map first (clip + rescale), then in-plane resampling to 3.5 mm
    with a Gaussian anti-alias prefilter when decimating, then center
    pad/crop to 128x128.  The z axis is left untouched.
    """
    volume.validate()
    # (nx, ny, nz) -> (nz, ny, nx) so slices index first
    slices = np.transpose(volume.voxels, (2, 1, 0)).astype(np.float32)
    slices = hu_to_model_range(slices).astype(np.float32)
    slices = _resample_plane(slices, (volume.spacing[1], volume.spacing[0]))
    slices = _pad_or_crop(slices)
    if not np.isfinite(slices).all():
        raise VolumeFormatError(f"{volume.source_id}: non-finite values after preprocessing")
    return PreprocessedVolume(
        slices=np.ascontiguousarray(slices, dtype=np.float32),
        z_spacing=float(volume.spacing[2]),
        source_id=volume.source_id,
    )
