"""PSF

Spatially-variant Gaussian point spread function of the LR scanner.

The width of the PSF is known on an irregular grid of (radial, axial) sample locations; anywhere else it is
obtained by bilinear interpolation over the quadrilateral formed by the nearest samples, clamping outside the
sampled range. The model is assumed radially and axially symmetric, so queries use |axial|.

The blur is a gather: every output voxel is a unit-sum Gaussian average of its input neighbourhood, with the
width evaluated at the output voxel. Boundaries replicate the edge voxels, so with a constant width the blur is
exactly `volume.gaussian_filter`.
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple, Union
import numpy as np
from petsr import config
from petsr.common import ConfigError, ShapeError, write_json, read_json
from petsr.volume import ImageGrid

logger = logging.getLogger(__name__)

SYMMETRY = 'radial-axial symmetric'


@dataclass(eq=False)
class PsfModel:
    radial_samples_mm: Tuple[float, ...]
    axial_samples_mm: Tuple[float, ...]
    sigma_mm: np.ndarray
    symmetry: str = SYMMETRY

    def __post_init__(self):
        radial = np.asarray(self.radial_samples_mm, dtype=np.float64)
        axial = np.asarray(self.axial_samples_mm, dtype=np.float64)
        sigma = np.array(self.sigma_mm, dtype=np.float64, ndmin=2)
        if radial.size < 1 or axial.size < 1:
            raise ConfigError("PSF model needs at least one radial and one axial sample")
        if np.any(np.diff(radial) <= 0) or np.any(np.diff(axial) <= 0):
            raise ConfigError("PSF sample locations must be strictly increasing")
        if sigma.shape != (radial.size, axial.size):
            raise ConfigError(f"sigma matrix shape {sigma.shape} does not match samples ({radial.size}, {axial.size})")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ConfigError("PSF sigmas must be positive and finite")
        if self.symmetry != SYMMETRY:
            raise ConfigError(f"unsupported PSF symmetry {self.symmetry}")
        self.radial_samples_mm = tuple(radial)
        self.axial_samples_mm = tuple(axial)
        self.sigma_mm = sigma


def fwhm_to_sigma(fwhm_mm: float) -> float:
    if fwhm_mm <= 0:
        raise ValueError(f"fwhm must be positive, got {fwhm_mm}")
    return fwhm_mm / config.FWHM_PER_SIGMA


def _sample_locations(extent: float, n: int) -> np.ndarray:
    """Irregular sampling, denser towards the edge where the PSF changes fastest"""
    if n == 1:
        return np.zeros(1)
    return extent * np.sqrt(np.linspace(0.0, 1.0, n))


def make_hrplus_like_model(inner_fwhm_mm: float = config.psf_inner_fwhm_mm, outer_fwhm_mm: float = config.psf_outer_fwhm_mm,
                           fov_radius_mm: float = config.fov_radius_mm, axial_extent_mm: float = config.psf_axial_extent_mm,
                           n_radial: int = config.psf_n_radial, n_axial: int = config.psf_n_axial,
                           axial_growth: float = 0.0) -> PsfModel:
    """
    FWHM grows linearly with radius from `inner_fwhm_mm` at the centre to `outer_fwhm_mm` at `fov_radius_mm`.

    Axially the FWHM is scaled by (1 + axial_growth * |axial| / (axial_extent / 2)); the default keeps it
    constant. With n_radial = 1 the single radial sample sits at the centre.
    """
    if not 0 < inner_fwhm_mm <= outer_fwhm_mm:
        raise ConfigError(f"need 0 < inner <= outer FWHM, got {inner_fwhm_mm}, {outer_fwhm_mm}")
    if n_radial < 1 or n_axial < 1 or fov_radius_mm <= 0 or axial_extent_mm <= 0 or axial_growth < 0:
        raise ConfigError("invalid PSF sampling parameters")
    radial = _sample_locations(fov_radius_mm, n_radial)
    axial = _sample_locations(axial_extent_mm / 2, n_axial)
    fwhm = inner_fwhm_mm + (outer_fwhm_mm - inner_fwhm_mm) * radial / fov_radius_mm
    axial_factor = 1 + axial_growth * axial / (axial_extent_mm / 2)
    sigma = np.outer(fwhm, axial_factor) / config.FWHM_PER_SIGMA
    return PsfModel(tuple(radial), tuple(axial), sigma)


def make_constant_model(sigma_mm: float) -> PsfModel:
    return PsfModel((0.0,), (0.0,), np.array([[sigma_mm]]))


def _bracket(samples: np.ndarray, query: np.ndarray):
    """Lower sample index and interpolation weight of each query, clamped to the sampled range"""
    if samples.size == 1:
        return np.zeros(query.shape, dtype=int), np.zeros(query.shape)
    q = np.clip(query, samples[0], samples[-1])
    i = np.clip(np.searchsorted(samples, q, side='right') - 1, 0, samples.size - 2)
    t = (q - samples[i]) / (samples[i + 1] - samples[i])
    return i, t


def interpolate_sigma(model: PsfModel, radius_mm: Union[float, np.ndarray], axial_mm: Union[float, np.ndarray]):
    radial = np.asarray(model.radial_samples_mm)
    axial = np.asarray(model.axial_samples_mm)
    r = np.asarray(radius_mm, dtype=np.float64)
    a = np.abs(np.asarray(axial_mm, dtype=np.float64))
    r, a = np.broadcast_arrays(r, a)
    i, t = _bracket(radial, r)
    j, s = _bracket(axial, a)
    i1 = np.minimum(i + 1, radial.size - 1)
    j1 = np.minimum(j + 1, axial.size - 1)
    sigma = model.sigma_mm
    value = ((1 - t) * ((1 - s) * sigma[i, j] + s * sigma[i, j1])
             + t * ((1 - s) * sigma[i1, j] + s * sigma[i1, j1]))
    return float(value) if value.ndim == 0 else value


def voxel_coordinates(grid: ImageGrid) -> Tuple[np.ndarray, np.ndarray]:
    """In-plane radius and axial offset (mm) of every voxel centre, measured from the grid centre"""
    nx, ny, nz = grid.dims
    vx, vy, vz = grid.voxel_size_mm
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing='ij')
    radius = np.sqrt(((x - (nx - 1) / 2) * vx) ** 2 + ((y - (ny - 1) / 2) * vy) ** 2)
    axial = (z - (nz - 1) / 2) * vz
    return radius, axial


def sigma_map(model: PsfModel, grid: ImageGrid) -> ImageGrid:
    radius, axial = voxel_coordinates(grid)
    return grid.like(interpolate_sigma(model, radius, axial), description='PSF sigma (mm)')


def _clamped_index(n: int, offset: int) -> np.ndarray:
    return np.clip(np.arange(n) + offset, 0, n - 1)


def _take_adjoint(values: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """Adjoint of `take(_clamped_index(n, offset), axis)`: scatter-add back to the clamped source positions"""
    n = values.shape[axis]
    moved = np.moveaxis(values, axis, 0)
    out = np.zeros_like(moved)
    first = max(0, -offset)
    last = min(n - 1, n - 1 - offset)
    if first <= last:
        out[first + offset:last + offset + 1] += moved[first:last + 1]
    if first > 0:
        out[0] += moved[:min(first, n)].sum(axis=0)
    if last < n - 1:
        out[n - 1] += moved[max(last + 1, 0):].sum(axis=0)
    return np.moveaxis(out, 0, axis)


class SpatiallyVariantBlur:
    """Gather blur operator for a fixed grid geometry, with its exact adjoint"""

    def __init__(self, model: PsfModel, grid: ImageGrid):
        self.shape = grid.data.shape
        self.voxel_size_mm = grid.voxel_size_mm
        sigma = sigma_map(model, grid).data
        # per array axis (z, y, x): offsets, per-voxel normalised weights
        self.kernels = []
        for axis, dim_index in ((0, 2), (1, 1), (2, 0)):
            if self.shape[axis] == 1:
                self.kernels.append(([0], np.ones((1,) + self.shape)))
                continue
            sigma_voxels = sigma / self.voxel_size_mm[dim_index]
            radius = np.floor(config.GAUSSIAN_TRUNCATE * sigma_voxels + 0.5).astype(int)
            max_radius = int(radius.max())
            offsets = list(range(-max_radius, max_radius + 1))
            weights = np.stack([np.where(np.abs(d) <= radius, np.exp(-0.5 * d * d / (sigma_voxels * sigma_voxels)), 0.0) for d in offsets])
            weights /= weights.sum(axis=0)
            self.kernels.append((offsets, weights))
        logger.debug("blur kernels for shape %s: %s taps", self.shape, [len(k[0]) for k in self.kernels])

    def _check(self, data: np.ndarray):
        if data.shape != self.shape:
            raise ShapeError(f"blur operator built for shape {self.shape}, got {data.shape}")

    def forward(self, data: np.ndarray) -> np.ndarray:
        self._check(data)
        (oz, wz), (oy, wy), (ox, wx) = self.kernels
        nz, ny, nx = self.shape
        out = np.zeros(self.shape)
        for kz, dz in enumerate(oz):
            shifted_z = data.take(_clamped_index(nz, dz), axis=0)
            for ky, dy in enumerate(oy):
                shifted_zy = shifted_z.take(_clamped_index(ny, dy), axis=1)
                row = np.zeros(self.shape)
                for kx, dx in enumerate(ox):
                    row += wx[kx] * shifted_zy.take(_clamped_index(nx, dx), axis=2)
                out += wz[kz] * wy[ky] * row
        return out

    def adjoint(self, data: np.ndarray) -> np.ndarray:
        self._check(data)
        (oz, wz), (oy, wy), (ox, wx) = self.kernels
        out = np.zeros(self.shape)
        for kz, dz in enumerate(oz):
            for ky, dy in enumerate(oy):
                weighted = wz[kz] * wy[ky] * data
                scattered = np.zeros(self.shape)
                for kx, dx in enumerate(ox):
                    scattered += _take_adjoint(wx[kx] * weighted, dx, axis=2)
                out += _take_adjoint(_take_adjoint(scattered, dy, axis=1), dz, axis=0)
        return out


def apply_spatially_variant_blur(image: ImageGrid, model: PsfModel) -> ImageGrid:
    blurred = SpatiallyVariantBlur(model, image).forward(image.data)
    if image.data.min() >= 0:
        # convex combinations of non-negative values; removes -0.0 style rounding noise
        blurred = np.maximum(blurred, 0.0)
    return image.like(blurred)


def write_psf_model(model: PsfModel, path: str):
    write_json(path, {'radial_samples_mm': list(model.radial_samples_mm),
                      'axial_samples_mm': list(model.axial_samples_mm),
                      'sigma_mm': model.sigma_mm.tolist(),
                      'symmetry': model.symmetry})


def read_psf_model(path: str) -> PsfModel:
    raw = read_json(path)
    return PsfModel(tuple(raw['radial_samples_mm']), tuple(raw['axial_samples_mm']), np.array(raw['sigma_mm']), raw.get('symmetry', SYMMETRY))


def psf_model_from_fwhm_samples(radial_mm: Sequence[float], axial_mm: Sequence[float], fwhm_mm: Sequence[Sequence[float]]) -> PsfModel:
    return PsfModel(tuple(radial_mm), tuple(axial_mm), np.asarray(fwhm_mm, dtype=np.float64) / config.FWHM_PER_SIGMA)
