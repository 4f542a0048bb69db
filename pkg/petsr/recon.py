"""Recon

2D parallel-beam projector and OSEM/MLEM reconstruction, used to simulate the LR-like and HR-like scans.

The system matrix H is pixel-driven: the centre of every pixel is projected onto the detector at each angle
and its mass (pixel area / bin width) is split linearly between the two nearest radial bins. Back projection
is the transpose of the same sparse matrix, so the pair is adjoint to rounding error.

Pixel centres sit at ((ix - (nx - 1) / 2) vx, (iy - (ny - 1) / 2) vy) and bin centres at (b - (n - 1) / 2) w,
so a pixel at the isocentre always lands on the central bin(s).
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Tuple
import numpy as np
from scipy import sparse
from petsr import config
from petsr.common import GeometryError, ShapeError, VolumeFormatError
from petsr.volume import ImageGrid, Modality, write_raw, read_raw

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScannerGeometry:
    n_angles: int
    n_radial_bins: int
    bin_width_mm: float
    fov_radius_mm: float = config.fov_radius_mm
    label: str = ''

    def __post_init__(self):
        if self.n_angles < 1 or self.n_radial_bins < 1:
            raise GeometryError(f"need at least one angle and one radial bin, got {self.n_angles}, {self.n_radial_bins}")
        if self.bin_width_mm <= 0 or self.fov_radius_mm <= 0:
            raise GeometryError(f"bin width and FOV radius must be positive, got {self.bin_width_mm}, {self.fov_radius_mm}")
        if self.n_radial_bins * self.bin_width_mm < 2 * self.fov_radius_mm:
            raise GeometryError(f"{self.n_radial_bins} bins of {self.bin_width_mm} mm do not cover a FOV of radius {self.fov_radius_mm} mm")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * np.pi / self.n_angles

    @classmethod
    def from_preset(cls, label: str, fov_radius_mm: float = config.fov_radius_mm) -> 'ScannerGeometry':
        preset = config.scanner_presets[label]
        n_bins = int(np.ceil(2 * fov_radius_mm / preset.bin_width_mm - 1e-9))
        return cls(preset.n_angles, n_bins, preset.bin_width_mm, fov_radius_mm, preset.label)

    def to_dict(self) -> dict:
        return {'n_angles': self.n_angles, 'n_radial_bins': self.n_radial_bins, 'bin_width_mm': self.bin_width_mm,
                'fov_radius_mm': self.fov_radius_mm, 'label': self.label}


@dataclass(eq=False)
class Sinogram:
    """Projection data (n_angles, n_radial_bins) of an image of `image_dims` (nx, ny) pixels.

    `count_scale` converts activity units to counts: it is 1 for noiseless projections and the applied
    scale factor after `poisson_sample`.
    """
    geometry: ScannerGeometry
    data: np.ndarray
    image_dims: Tuple[int, int]
    voxel_size_mm: Tuple[float, float, float]
    count_scale: float = field(default=1.0)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        expected = (self.geometry.n_angles, self.geometry.n_radial_bins)
        if data.shape != expected:
            raise ShapeError(f"sinogram shape {data.shape} does not match geometry {expected}")
        if not np.all(np.isfinite(data)) or np.any(data < 0):
            raise VolumeFormatError("sinogram data must be finite and non-negative")
        self.data = data
        self.image_dims = tuple(int(d) for d in self.image_dims)  # type: ignore[assignment]
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)  # type: ignore[assignment]

    def like(self, data, count_scale=None) -> 'Sinogram':
        return Sinogram(self.geometry, data, self.image_dims, self.voxel_size_mm, self.count_scale if count_scale is None else count_scale)


def check_fov(geometry: ScannerGeometry, dims: Tuple[int, int], voxel_mm: Tuple[float, ...]):
    half_diagonal = np.hypot(dims[0] * voxel_mm[0] / 2, dims[1] * voxel_mm[1] / 2)
    if half_diagonal > geometry.fov_radius_mm * (1 + 1e-9):
        raise GeometryError(f"image of {dims[0]}x{dims[1]} voxels of {voxel_mm[0]}x{voxel_mm[1]} mm "
                            f"(half diagonal {half_diagonal:.1f} mm) extends beyond the FOV radius {geometry.fov_radius_mm} mm")


@lru_cache(maxsize=16)
def system_matrix(geometry: ScannerGeometry, dims: Tuple[int, int], voxel_mm: Tuple[float, float]) -> sparse.csr_matrix:
    """Sparse H with rows angle * n_bins + bin and columns iy * nx + ix"""
    nx, ny = dims
    vx, vy = voxel_mm
    n_bins = geometry.n_radial_bins
    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing='ij')
    x = ((ix - (nx - 1) / 2) * vx).ravel()
    y = ((iy - (ny - 1) / 2) * vy).ravel()
    columns = np.arange(nx * ny)
    mass = vx * vy / geometry.bin_width_mm
    rows, cols, values = [], [], []
    for a, theta in enumerate(geometry.angles):
        position = (x * np.cos(theta) + y * np.sin(theta)) / geometry.bin_width_mm + (n_bins - 1) / 2
        lower = np.floor(position).astype(int)
        frac = position - lower
        for b, w in ((lower, 1 - frac), (lower + 1, frac)):
            keep = (b >= 0) & (b < n_bins) & (w > 0)
            rows.append(a * n_bins + b[keep])
            cols.append(columns[keep])
            values.append(mass * w[keep])
    matrix = sparse.coo_matrix((np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(geometry.n_angles * n_bins, nx * ny)).tocsr()
    logger.debug("system matrix for %s, image %s: %s non-zeros", geometry.label or geometry, dims, matrix.nnz)
    return matrix


def _matrix_for(geometry: ScannerGeometry, dims: Tuple[int, int], voxel_mm: Tuple[float, ...]) -> sparse.csr_matrix:
    check_fov(geometry, dims, voxel_mm)
    return system_matrix(geometry, (int(dims[0]), int(dims[1])), (float(voxel_mm[0]), float(voxel_mm[1])))


def _single_slice(image: ImageGrid) -> np.ndarray:
    if image.data.shape[0] != 1:
        raise ShapeError(f"projector works on 2D slices, got {image.data.shape[0]} slices")
    return image.data[0]


def forward_project(image: ImageGrid, geometry: ScannerGeometry) -> Sinogram:
    plane = _single_slice(image)
    dims = (image.dims[0], image.dims[1])
    matrix = _matrix_for(geometry, dims, image.voxel_size_mm)
    data = matrix @ plane.ravel()
    return Sinogram(geometry, data.reshape(geometry.n_angles, geometry.n_radial_bins), dims, image.voxel_size_mm)


def back_project(sino: Sinogram) -> ImageGrid:
    nx, ny = sino.image_dims
    matrix = _matrix_for(sino.geometry, sino.image_dims, sino.voxel_size_mm)
    data = matrix.T @ sino.data.ravel()
    return ImageGrid(data.reshape(1, ny, nx), sino.voxel_size_mm, Modality.GENERIC, 'back projection')


def subset_rows(geometry: ScannerGeometry, n_subsets: int, subset: int) -> np.ndarray:
    """Sinogram rows of the interleaved subset: angles i with i mod n_subsets == subset"""
    angles = np.arange(subset, geometry.n_angles, n_subsets)
    return (angles[:, np.newaxis] * geometry.n_radial_bins + np.arange(geometry.n_radial_bins)).ravel()


def sensitivity_image(geometry: ScannerGeometry, dims: Tuple[int, int], voxel_mm: Tuple[float, float, float],
                      n_subsets: int = 1, subset: int = 0) -> ImageGrid:
    """H_s^T 1 for one subset of angles (all angles by default)"""
    matrix = _matrix_for(geometry, dims, voxel_mm)
    if n_subsets > 1:
        matrix = matrix[subset_rows(geometry, n_subsets, subset)]
    data = np.asarray(matrix.sum(axis=0)).ravel()
    return ImageGrid(data.reshape(1, dims[1], dims[0]), voxel_mm, Modality.GENERIC, 'sensitivity')


def poisson_sample(sino: Sinogram, total_counts: float, seed: int) -> Sinogram:
    if total_counts <= 0:
        raise ValueError(f"total counts must be positive, got {total_counts}")
    total = sino.data.sum()
    if total <= 0:
        raise ValueError("cannot sample counts from a sinogram with zero total")
    scale = total_counts / total
    rng = np.random.default_rng(seed)
    counts = rng.poisson(sino.data * scale).astype(np.float64)
    return sino.like(counts, count_scale=sino.count_scale * scale)


def poisson_log_likelihood(sino: Sinogram, image: ImageGrid) -> float:
    """sum(y log(Hx) - Hx), dropping the constant log(y!) term"""
    expected = forward_project(image, sino.geometry).data
    y = sino.data
    with np.errstate(divide='ignore'):
        log_expected = np.where(y > 0, np.log(expected), 0.0)
    return float(np.sum(y * log_expected - expected))


def osem_reconstruct(sino: Sinogram, n_iterations: int = config.osem_iterations, n_subsets: int = config.osem_subsets,
                     init: Optional[ImageGrid] = None, dims: Optional[Tuple[int, int]] = None,
                     voxel_mm: Optional[Tuple[float, float, float]] = None) -> ImageGrid:
    """
    Ordered-subsets EM; with n_subsets = 1 this is MLEM.

    Parameters
    ----------
    sino: measured (or noiseless) sinogram, in counts
    n_iterations: full passes over all subsets
    n_subsets: must divide the number of angles; subset s holds the angles i with i mod n_subsets == s
    init: strictly positive start image; defaults to the uniform image sum(y) / sum(H^T 1)
    dims, voxel_mm: reconstruction grid, the grid of the projected image by default

    Returns
    -------
    Reconstructed image in the units of the sinogram (divide by `sino.count_scale` for activity)
    """
    geometry = sino.geometry
    if n_iterations < 0:
        raise ValueError(f"number of iterations must be non-negative, got {n_iterations}")
    if n_subsets < 1 or geometry.n_angles % n_subsets != 0:
        raise GeometryError(f"{n_subsets} subsets do not divide {geometry.n_angles} angles")
    dims = tuple(dims) if dims is not None else sino.image_dims  # type: ignore[assignment]
    voxel_mm = tuple(voxel_mm) if voxel_mm is not None else sino.voxel_size_mm  # type: ignore[assignment]
    nx, ny = dims
    matrix = _matrix_for(geometry, dims, voxel_mm)
    subsets = [matrix] if n_subsets == 1 else [matrix[subset_rows(geometry, n_subsets, s)] for s in range(n_subsets)]
    data = sino.data.ravel()
    measured = [data] if n_subsets == 1 else [data[subset_rows(geometry, n_subsets, s)] for s in range(n_subsets)]
    sensitivity = [np.asarray(h.sum(axis=0)).ravel() for h in subsets]

    if init is None:
        x = np.full(nx * ny, data.sum() / sum(s.sum() for s in sensitivity))
    else:
        if (init.dims[0], init.dims[1]) != (nx, ny):
            raise ShapeError(f"initial image dims {init.dims} do not match reconstruction grid {dims}")
        x = _single_slice(init).ravel().copy()
        # a zero voxel stays zero under the multiplicative update
        if np.any(x <= 0):
            raise ValueError("initial image must be strictly positive")

    for iteration in range(n_iterations):
        for h, y, sens in zip(subsets, measured, sensitivity):
            expected = h @ x
            guard = 1e-12 * expected.max() if expected.max() > 0 else np.finfo(np.float64).tiny
            inconsistent = (expected < guard) & (y > 0)
            if np.any(inconsistent):
                logger.warning("%s bins with counts but no expected counts", int(inconsistent.sum()))
            ratio = y / np.maximum(expected, guard)
            back = h.T @ ratio
            update = sens > 0
            x[update] *= back[update] / sens[update]
        logger.debug("OSEM iteration %s/%s done", iteration + 1, n_iterations)
    return ImageGrid(x.reshape(1, ny, nx), voxel_mm, Modality.PET, f"OSEM {n_iterations}it x {n_subsets}ss")


def simulate_scan(activity: ImageGrid, geometry: ScannerGeometry, counts_per_slice: float, seed: int,
                  recon_dims: Optional[Tuple[int, int]] = None, recon_voxel_mm: Optional[Tuple[float, float]] = None,
                  n_iterations: int = config.osem_iterations, n_subsets: int = config.osem_subsets) -> ImageGrid:
    """Project, Poisson-sample and reconstruct each transverse slice; returns activity units"""
    nx, ny, nz = activity.dims
    recon_dims = tuple(recon_dims) if recon_dims is not None else (nx, ny)  # type: ignore[assignment]
    in_plane = tuple(recon_voxel_mm) if recon_voxel_mm is not None else activity.voxel_size_mm[:2]
    voxel_mm = (float(in_plane[0]), float(in_plane[1]), activity.voxel_size_mm[2])
    seeds = np.random.SeedSequence(seed).generate_state(nz)
    slices = []
    for z in range(nz):
        sino = forward_project(activity.slice(z), geometry)
        noisy = poisson_sample(sino, counts_per_slice, int(seeds[z]))
        image = osem_reconstruct(noisy, n_iterations, n_subsets, dims=recon_dims, voxel_mm=voxel_mm)
        slices.append(image.like(image.data / noisy.count_scale))
    logger.info("simulated %s scan of %s slices (%s counts per slice)", geometry.label or 'scanner', nz, counts_per_slice)
    return ImageGrid(np.concatenate([s.data for s in slices]), voxel_mm, Modality.PET, f"{geometry.label} reconstruction")


def write_sinogram(sino: Sinogram, path: str):
    sidecar = {'dims': [sino.geometry.n_radial_bins, sino.geometry.n_angles, 1],
               'geometry': sino.geometry.to_dict(),
               'image_dims': list(sino.image_dims),
               'voxel_size_mm': list(sino.voxel_size_mm),
               'count_scale': sino.count_scale,
               'modality': 'SINOGRAM'}
    write_raw(path, sino.data, sidecar)


def read_sinogram(path: str) -> Sinogram:
    data, sidecar = read_raw(path)
    try:
        geometry = ScannerGeometry(**sidecar['geometry'])
        return Sinogram(geometry, data.reshape(geometry.n_angles, geometry.n_radial_bins), tuple(sidecar['image_dims']),
                        tuple(sidecar['voxel_size_mm']), float(sidecar.get('count_scale', 1.0)))
    except (KeyError, TypeError) as ex:
        raise VolumeFormatError(f"corrupt sinogram sidecar for {path}: {ex}") from ex
