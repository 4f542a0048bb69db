"""Phantom

Synthetic brain-like label maps and the tissue tables that turn them into ground-truth PET activity and
HR MR intensity images.

A phantom is a stack of nested deformed ellipses: a thin CSF rim, the gray matter ribbon, the white
matter core, two CSF ventricles and a small blood pool. Boundaries are perturbed by a few random
angular harmonics whose amplitude is scaled by `variability`, so distinct seeds give distinct anatomies
while `variability = 0` reproduces the same geometry for every seed.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Dict, Tuple
import numpy as np
from scipy import ndimage
from petsr import config
from petsr.common import ConfigError, ShapeError, VolumeFormatError, write_json, read_json
from petsr.volume import ImageGrid, Modality

logger = logging.getLogger(__name__)

MIN_INPLANE_DIM = 32
# head outline in normalised coordinates, leaving room for the CSF rim and the largest perturbation
HEAD_SEMI_AXES = (0.78, 0.86)
CSF_RIM = 1.05
WHITE_FRACTION = 0.8
VENTRICLE_CENTRES = ((-0.15, -0.05), (0.15, -0.05))
VENTRICLE_SEMI_AXES = (0.08, 0.22)
BLOOD_POOL_CENTRE = (0.0, 0.55)
BLOOD_POOL_RADIUS = 0.08
HARMONICS = (2, 3, 4, 5)
HARMONIC_AMPLITUDE = 0.08


@dataclass(eq=False)
class LabelGrid:
    labels: np.ndarray
    voxel_size_mm: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 2:
            labels = labels[np.newaxis]
        if labels.ndim != 3:
            raise ShapeError(f"label data must be 2D or 3D, got shape {labels.shape}")
        labels = labels.astype(np.int64)
        valid = np.isin(labels, list(config.tissue_labels.values()))
        if not np.all(valid):
            raise VolumeFormatError(f"labels outside the tissue set: {sorted(set(np.unique(labels[~valid])))}")
        if not background_touches_border(labels):
            raise VolumeFormatError("background region not connected to the grid border")
        self.labels = labels
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)  # type: ignore[assignment]

    @property
    def dims(self) -> Tuple[int, int, int]:
        nz, ny, nx = self.labels.shape
        return nx, ny, nz

    def to_grid(self) -> ImageGrid:
        return ImageGrid(self.labels.astype(np.float64), self.voxel_size_mm, Modality.LABEL, 'tissue labels')

    @classmethod
    def from_grid(cls, grid: ImageGrid) -> 'LabelGrid':
        return cls(np.rint(grid.data).astype(np.int64), grid.voxel_size_mm)


class TissueTable(NamedTuple):
    pet_activity: Dict[int, float]
    mr_intensity: Dict[int, float]
    mr_noise_sigma: float = config.default_mr_noise_sigma


def default_tissue_table() -> TissueTable:
    return TissueTable(dict(config.default_pet_activity), dict(config.default_mr_intensity), config.default_mr_noise_sigma)


def validate_tissue_table(table: TissueTable):
    values = list(table.pet_activity.values()) + list(table.mr_intensity.values()) + [table.mr_noise_sigma]
    if not all(np.isfinite(v) and v >= 0 for v in values):
        raise ConfigError(f"tissue table entries must be finite and non-negative: {table}")


def write_tissue_table(table: TissueTable, path: str):
    write_json(path, {'pet_activity': {str(k): v for k, v in table.pet_activity.items()},
                      'mr_intensity': {str(k): v for k, v in table.mr_intensity.items()},
                      'mr_noise_sigma': table.mr_noise_sigma})


def read_tissue_table(path: str) -> TissueTable:
    raw = read_json(path)
    table = TissueTable({int(k): float(v) for k, v in raw['pet_activity'].items()},
                        {int(k): float(v) for k, v in raw['mr_intensity'].items()},
                        float(raw.get('mr_noise_sigma', config.default_mr_noise_sigma)))
    validate_tissue_table(table)
    return table


def background_touches_border(labels: np.ndarray) -> bool:
    """Every connected background component (in 3D) reaches the border of the grid"""
    components, n = ndimage.label(labels == config.BACKGROUND)
    if n == 0:
        return True
    border = np.zeros(labels.shape, dtype=bool)
    border[:, 0, :] = border[:, -1, :] = border[:, :, 0] = border[:, :, -1] = True
    if labels.shape[0] > 1:
        border[0] = border[-1] = True
    touching = np.unique(components[border & (components > 0)])
    return len(touching) == n


def _boundary(theta: np.ndarray, rng: np.random.Generator, variability: float) -> np.ndarray:
    """Radial scale factor 1 + sum of random angular harmonics"""
    scale = np.ones_like(theta)
    for k in HARMONICS:
        amplitude = rng.uniform(0.5, 1.0) * HARMONIC_AMPLITUDE / k
        phase = rng.uniform(0, 2 * np.pi)
        scale += variability * amplitude * np.cos(k * theta + phase)
    return scale


def generate_phantom(seed: int, dims: Tuple[int, int, int], voxel_mm: Tuple[float, float, float], variability: float) -> LabelGrid:
    nx, ny, nz = (int(d) for d in dims)
    if nx < MIN_INPLANE_DIM or ny < MIN_INPLANE_DIM or nz < 1:
        raise ConfigError(f"phantom dims {dims} too small to hold all tissue labels (in-plane minimum {MIN_INPLANE_DIM})")
    if not 0 <= variability <= 1:
        raise ConfigError(f"variability must be in [0, 1], got {variability}")
    rng = np.random.default_rng(seed)
    # draws happen regardless of variability so the stream layout does not depend on it
    head_scale = 1 + variability * rng.uniform(-0.015, 0.015)
    white_scale = 1 + variability * rng.uniform(-0.08, 0.08)
    ventricle_scale = 1 + variability * rng.uniform(-0.3, 0.3, size=2)
    ventricle_shift = variability * rng.uniform(-0.03, 0.03, size=(2, 2))
    pool_shift = variability * rng.uniform(-0.05, 0.05, size=2)

    # normalised coordinates in [-1, 1] over the grid
    v, u = np.meshgrid((np.arange(ny) - (ny - 1) / 2) / (ny / 2), (np.arange(nx) - (nx - 1) / 2) / (nx / 2), indexing='ij')
    theta = np.arctan2(v, u)
    head_boundary = _boundary(theta, rng, variability) * head_scale
    white_boundary = _boundary(theta, rng, variability) * white_scale
    rho = np.sqrt((u / HEAD_SEMI_AXES[0]) ** 2 + (v / HEAD_SEMI_AXES[1]) ** 2)

    labels = np.zeros((nz, ny, nx), dtype=np.int64)
    for z in range(nz):
        w = (z - (nz - 1) / 2) / (nz / 2) if nz > 1 else 0.0
        axial_scale = 1 - 0.2 * w * w
        rho_z = rho / axial_scale
        plane = np.full((ny, nx), config.BACKGROUND, dtype=np.int64)
        plane[rho_z <= CSF_RIM * head_boundary] = config.CSF
        plane[rho_z <= head_boundary] = config.GRAY_MATTER
        plane[rho_z <= WHITE_FRACTION * white_boundary] = config.WHITE_MATTER
        for (cu, cv), scale, shift in zip(VENTRICLE_CENTRES, ventricle_scale, ventricle_shift):
            du = (u - (cu + shift[0]) * axial_scale) / (VENTRICLE_SEMI_AXES[0] * scale * axial_scale)
            dv = (v - (cv + shift[1]) * axial_scale) / (VENTRICLE_SEMI_AXES[1] * scale * axial_scale)
            plane[du * du + dv * dv <= 1] = config.CSF
        pu = u - (BLOOD_POOL_CENTRE[0] + pool_shift[0]) * axial_scale
        pv = v - (BLOOD_POOL_CENTRE[1] + pool_shift[1]) * axial_scale
        plane[np.sqrt(pu * pu + pv * pv) <= BLOOD_POOL_RADIUS * axial_scale] = config.BLOOD_POOL
        labels[z] = plane

    missing = set(config.tissue_labels.values()) - set(np.unique(labels))
    if missing:
        raise ConfigError(f"phantom dims {dims} too small: labels {sorted(missing)} not represented")
    logger.debug("generated phantom seed=%s dims=%s variability=%s", seed, dims, variability)
    return LabelGrid(labels, voxel_mm)


def _lookup(labels: LabelGrid, values: Dict[int, float], what: str) -> np.ndarray:
    present = set(int(label) for label in np.unique(labels.labels))
    missing = present - set(values)
    if missing:
        raise ConfigError(f"tissue table has no {what} for labels {sorted(missing)}")
    table = np.zeros(max(config.tissue_labels.values()) + 1)
    for label, value in values.items():
        if 0 <= label < table.size:
            table[label] = value
    return table[labels.labels]


def labels_to_activity(labels: LabelGrid, table: TissueTable) -> ImageGrid:
    validate_tissue_table(table)
    return ImageGrid(_lookup(labels, table.pet_activity, 'PET activity'), labels.voxel_size_mm, Modality.PET, 'true PET')


def labels_to_mr(labels: LabelGrid, table: TissueTable, seed: int) -> ImageGrid:
    """Piecewise-constant MR means plus Gaussian noise inside the head, clipped at zero"""
    validate_tissue_table(table)
    means = _lookup(labels, table.mr_intensity, 'MR intensity')
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=means.shape) * table.mr_noise_sigma
    inside = labels.labels != config.BACKGROUND
    data = np.where(inside, np.clip(means + noise, 0, None), means)
    return ImageGrid(data, labels.voxel_size_mm, Modality.MR, 'HR MR')


def brain_mask(labels: LabelGrid) -> np.ndarray:
    return labels.labels != config.BACKGROUND
