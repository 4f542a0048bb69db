"""Volume

Image grid type shared by every other module, plus its file format and the image-domain operations
needed to build the studies: bicubic resampling, Gaussian post-filtering and 8-bit slice export.

Arrays are held as (nz, ny, nx) in C order, so x is the fastest axis both in memory and on disk.
`dims` is reported as (nx, ny, nz); 2D images have nz = 1.

On disk a volume is a pair of files:

- `<name>.raw`: little-endian float32 samples, x fastest
- `<name>.json`: sidecar with `dims`, `voxel_size_mm`, `modality` and `description`

"""

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Tuple, Sequence
import numpy as np
from scipy.ndimage import gaussian_filter1d
from PIL import Image
from petsr import config
from petsr.common import VolumeFormatError, ShapeError, write_bytes, write_json, read_json

logger = logging.getLogger(__name__)

RAW_DTYPE = '<f4'


class Modality(str, Enum):
    PET = 'PET'
    MR = 'MR'
    LABEL = 'LABEL'
    GENERIC = 'GENERIC'


@dataclass(eq=False)
class ImageGrid:
    data: np.ndarray
    voxel_size_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.GENERIC
    description: str = field(default='')

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3:
            raise ShapeError(f"image data must be 2D or 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeFormatError("image contains non-finite values")
        self.modality = Modality(self.modality)
        if self.modality == Modality.PET and np.any(data < 0):
            raise VolumeFormatError(f"PET image with negative values (min {data.min()})")
        voxel = tuple(float(v) for v in self.voxel_size_mm)
        if len(voxel) != 3 or min(voxel) <= 0:
            raise VolumeFormatError(f"voxel sizes must be three positive values, got {self.voxel_size_mm}")
        self.data = data
        self.voxel_size_mm = voxel  # type: ignore[assignment]

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def n_voxels(self) -> int:
        return self.data.size

    def like(self, data, modality=None, description=None) -> 'ImageGrid':
        """New grid with the same geometry"""
        return ImageGrid(data, self.voxel_size_mm, modality or self.modality, self.description if description is None else description)

    def slice(self, z: int) -> 'ImageGrid':
        return self.like(self.data[z:z + 1])

    @classmethod
    def stack(cls, slices: Sequence['ImageGrid']) -> 'ImageGrid':
        first = slices[0]
        return first.like(np.concatenate([s.data for s in slices], axis=0))

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return (self.voxel_size_mm == other.voxel_size_mm and self.modality == other.modality
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))


def _base_name(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext in ('.raw', '.json') else path


def write_raw(path: str, array: np.ndarray, sidecar: dict):
    """Write any array as float32 raw data plus a JSON sidecar"""
    base = _base_name(path)
    write_bytes(f"{base}.raw", np.ascontiguousarray(array, dtype=RAW_DTYPE).tobytes())
    write_json(f"{base}.json", sidecar)


def read_raw(path: str) -> Tuple[np.ndarray, dict]:
    """Read raw data and sidecar; the array is returned flat, as float64"""
    base = _base_name(path)
    sidecar_file = f"{base}.json"
    if not os.path.exists(sidecar_file):
        raise VolumeFormatError(f"missing sidecar file {sidecar_file}")
    try:
        sidecar = read_json(sidecar_file)
        dims = [int(d) for d in sidecar['dims']]
    except (ValueError, KeyError, TypeError) as ex:
        raise VolumeFormatError(f"corrupt sidecar file {sidecar_file}: {ex}") from ex
    data = np.fromfile(f"{base}.raw", dtype=RAW_DTYPE).astype(np.float64)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise VolumeFormatError(f"{base}.raw holds {data.size} values, dims {dims} imply {expected}")
    if not np.all(np.isfinite(data)):
        raise VolumeFormatError(f"{base}.raw contains non-finite values")
    return data, sidecar


def write_volume(grid: ImageGrid, path: str):
    sidecar = {'dims': list(grid.dims),
               'voxel_size_mm': list(grid.voxel_size_mm),
               'modality': grid.modality.value,
               'description': grid.description}
    write_raw(path, grid.data, sidecar)


def read_volume(path: str) -> ImageGrid:
    data, sidecar = read_raw(path)
    nx, ny, nz = (int(d) for d in sidecar['dims'])
    try:
        return ImageGrid(data.reshape(nz, ny, nx), tuple(sidecar['voxel_size_mm']),
                         Modality(sidecar.get('modality', 'GENERIC')), sidecar.get('description', ''))
    except (KeyError, TypeError) as ex:
        raise VolumeFormatError(f"corrupt sidecar for {path}: {ex}") from ex


def catmull_rom_weights(t: np.ndarray) -> np.ndarray:
    """Cubic convolution weights (a = -0.5) of the taps at offsets -1, 0, 1, 2 for fractional positions t"""
    a = -0.5
    weights = []
    for offset in (-1, 0, 1, 2):
        s = np.abs(t - offset)
        near = ((a + 2) * s - (a + 3)) * s * s + 1
        far = ((a * s - 5 * a) * s + 8 * a) * s - 4 * a
        weights.append(np.where(s <= 1, near, np.where(s < 2, far, 0.0)))
    return np.stack(weights)


def _resample_axis(data: np.ndarray, axis: int, n_target: int, source_voxel: float, target_voxel: float) -> np.ndarray:
    n_source = data.shape[axis]
    # centre-aligned mapping of target voxel centres to continuous source indices
    position = (np.arange(n_target) - (n_target - 1) / 2) * target_voxel / source_voxel + (n_source - 1) / 2
    base = np.floor(position).astype(int)
    weights = catmull_rom_weights(position - base)
    moved = np.moveaxis(data, axis, 0)
    out = np.zeros((n_target,) + moved.shape[1:])
    shape = (n_target,) + (1,) * (moved.ndim - 1)
    for k, offset in enumerate((-1, 0, 1, 2)):
        idx = np.clip(base + offset, 0, n_source - 1)
        out += weights[k].reshape(shape) * moved[idx]
    return np.moveaxis(out, 0, axis)


def resample_bicubic(grid: ImageGrid, target_dims: Tuple[int, int, int], target_voxel_mm: Tuple[float, float, float]) -> ImageGrid:
    """Resample onto a new grid centred on the same field of view, one axis at a time, clamping at the edges"""
    if min(target_dims) < 1:
        raise ValueError(f"target dims must be >= 1, got {target_dims}")
    if min(target_voxel_mm) <= 0:
        raise ValueError(f"target voxel sizes must be positive, got {target_voxel_mm}")
    data = grid.data
    # array axes are (z, y, x); dims are (x, y, z)
    for axis, dim_index in ((2, 0), (1, 1), (0, 2)):
        n_target = int(target_dims[dim_index])
        source_voxel = grid.voxel_size_mm[dim_index]
        target_voxel = float(target_voxel_mm[dim_index])
        if n_target == data.shape[axis] and target_voxel == source_voxel:
            continue
        data = _resample_axis(data, axis, n_target, source_voxel, target_voxel)
    if grid.modality == Modality.PET:
        # cubic overshoot must not produce negative activity
        data = np.clip(data, 0, None)
    return ImageGrid(data, tuple(target_voxel_mm), grid.modality, grid.description)


def gaussian_filter(grid: ImageGrid, fwhm_mm: float) -> ImageGrid:
    """Separable Gaussian post-filter with edge replication; kernels have unit sum"""
    if fwhm_mm <= 0:
        raise ValueError(f"fwhm must be positive, got {fwhm_mm}")
    sigma_mm = fwhm_mm / config.FWHM_PER_SIGMA
    data = grid.data
    for axis, dim_index in ((2, 0), (1, 1), (0, 2)):
        if data.shape[axis] == 1:
            continue
        sigma_voxels = sigma_mm / grid.voxel_size_mm[dim_index]
        data = gaussian_filter1d(data, sigma_voxels, axis=axis, mode='nearest', truncate=config.GAUSSIAN_TRUNCATE)
    return grid.like(data)


def export_slice_png(grid: ImageGrid, axis: str, index: int, window: Tuple[float, float], path: str) -> str:
    """Write one slice as an 8-bit grayscale PNG, linearly windowed to [0, 255]"""
    lo, hi = window
    if not lo < hi:
        raise ValueError(f"window min must be below window max, got {window}")
    axes = {'x': 2, 'y': 1, 'z': 0}
    if axis not in axes:
        raise ValueError(f"axis must be one of {list(axes)}, got {axis}")
    n = grid.data.shape[axes[axis]]
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} out of range [0, {n})")
    plane = np.take(grid.data, index, axis=axes[axis])
    # half-way values round up
    pixels = np.floor(np.clip((plane - lo) * 255.0 / (hi - lo), 0, 255) + 0.5).astype(np.uint8)
    Image.fromarray(pixels, mode='L').save(path)
    logger.info('writing file %s', path)
    return path
