"""Pipeline

Module orchestrating the three studies: synthesis of subject datasets, patch extraction, per-subject intensity
normalisation, execution of every requested method on the validation subjects and generation of the report.

Study 1: input = LR-like OSEM reconstruction, blurred with the spatially-variant PSF and upsampled to the
HR grid; target = true PET.
Study 2: input as in Study 1; target = HR-like OSEM reconstruction with a 2.4 mm FWHM post-filter.
Study 3: target as in Study 2; input = the spatially-variant PSF applied to that target (no second scan).

Under the output directory (environment variable PETSR_OUTPUT_PATH by default) a study writes:

- volumes/: one volume per method and validation subject, plus the inputs and references
- checkpoints/: network checkpoints and training histories
- png/: comparison panels and single-slice exports
- report.csv, report.json: the metrics report

"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, replace
from typing import NamedTuple, Tuple, List, Optional, Dict, Union
import numpy as np
import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
from petsr import config  # noqa: E402
from petsr.common import ConfigError, ShapeError, ConvergenceError, ensure_folder, read_json  # noqa: E402
from petsr.deconv import DeconvConfig, JeConfig, TV, JE, penalized_deconvolve, select_beta  # noqa: E402
from petsr.metrics import MetricsReport, evaluate  # noqa: E402
from petsr.nn import (Network, NetworkSpec, TrainConfig, build_network, network_spec, forward_sr, train,  # noqa: E402
                      save_checkpoint, load_checkpoint, write_history)
from petsr.phantom import LabelGrid, generate_phantom, default_tissue_table, labels_to_activity, labels_to_mr, brain_mask  # noqa: E402
from petsr.psf import PsfModel, make_hrplus_like_model, apply_spatially_variant_blur, read_psf_model  # noqa: E402
from petsr.recon import ScannerGeometry, check_fov, simulate_scan  # noqa: E402
from petsr.volume import ImageGrid, Modality, resample_bicubic, gaussian_filter, write_volume, export_slice_png  # noqa: E402

logger = logging.getLogger(__name__)


class StudyConfig(NamedTuple):
    study: int = 1
    n_subjects: int = 20
    n_train: int = 15
    seed: int = 0
    phantom_dims: Tuple[int, int, int] = (64, 64, 8)
    phantom_voxel_mm: Tuple[float, float, float] = (3.0, 3.0, 3.0)
    variability: float = 0.5
    n_angles: int = 96
    fov_radius_mm: float = config.fov_radius_mm
    lr_bin_width_mm: float = config.scanner_presets['LR-like'].bin_width_mm
    hr_bin_width_mm: float = config.scanner_presets['HR-like'].bin_width_mm
    lr_recon_dims: Tuple[int, int] = (32, 32)
    lr_recon_voxel_mm: Tuple[float, float] = (6.0, 6.0)
    counts_per_slice: float = config.counts_per_slice
    osem_iterations: int = config.osem_iterations
    osem_subsets: int = config.osem_subsets
    hr_post_filter_fwhm_mm: float = config.hr_post_filter_fwhm_mm
    psf_inner_fwhm_mm: float = config.psf_inner_fwhm_mm
    psf_outer_fwhm_mm: float = config.psf_outer_fwhm_mm
    psf_n_radial: int = config.psf_n_radial
    psf_n_axial: int = config.psf_n_axial
    psf_axial_growth: float = 0.0
    psf_file: Optional[str] = None
    patch_size: int = config.patch_size
    patch_stride: int = config.patch_stride
    methods: Tuple[str, ...] = ('LR', 'TV', 'JE', 'S1', 'S2')
    epochs: int = config.epochs
    batch_size: int = config.batch_size
    learning_rate: float = config.learning_rate
    filters: int = config.n_filters
    precision: str = 'float32'
    tv_beta: Optional[float] = None
    je_beta: Optional[float] = None
    deconv_max_iters: int = config.deconv_max_iters
    je_bins: int = config.je_bins
    use_mask: bool = False
    panels: bool = True
    output_dir: str = config.output_folder

    @classmethod
    def from_dict(cls, raw: Dict) -> 'StudyConfig':
        unknown = set(raw) - set(cls._fields)
        if unknown:
            raise ConfigError(f"unknown study config keys {sorted(unknown)}")
        values = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
        cfg = cls(**values)
        validate_study_config(cfg)
        return cfg

    @classmethod
    def from_json(cls, path: str) -> 'StudyConfig':
        try:
            raw = read_json(path)
        except ValueError as ex:
            raise ConfigError(f"study config {path} is not valid JSON: {ex}") from ex
        if not isinstance(raw, dict):
            raise ConfigError(f"study config {path} must hold a JSON object")
        # PSF files are named relative to the study file
        if raw.get('psf_file') and not os.path.isabs(raw['psf_file']):
            raw['psf_file'] = os.path.join(os.path.dirname(path), raw['psf_file'])
        return cls.from_dict(raw)

    def to_dict(self) -> Dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self._asdict().items()}

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of every setting except the output directory"""
        settings = self.to_dict()
        settings.pop('output_dir')
        return hashlib.sha256(json.dumps(settings, sort_keys=True, separators=(',', ':')).encode('UTF-8')).hexdigest()

    def lr_geometry(self) -> ScannerGeometry:
        return _geometry(self, self.lr_bin_width_mm, 'LR-like')

    def hr_geometry(self) -> ScannerGeometry:
        return _geometry(self, self.hr_bin_width_mm, 'HR-like')

    def psf_model(self) -> PsfModel:
        """The PSF of `psf_file` when given, else the linear radial profile of the psf_* settings"""
        if self.psf_file:
            return read_psf_model(self.psf_file)
        axial_extent = max(self.phantom_dims[2] * self.phantom_voxel_mm[2], 1e-3)
        return make_hrplus_like_model(self.psf_inner_fwhm_mm, self.psf_outer_fwhm_mm, self.fov_radius_mm, axial_extent,
                                      self.psf_n_radial, self.psf_n_axial, self.psf_axial_growth)


def _geometry(cfg: StudyConfig, bin_width_mm: float, label: str) -> ScannerGeometry:
    n_bins = int(np.ceil(2 * cfg.fov_radius_mm / bin_width_mm - 1e-9))
    return ScannerGeometry(cfg.n_angles, n_bins, bin_width_mm, cfg.fov_radius_mm, label)


def validate_study_config(cfg: StudyConfig):
    if cfg.study not in (1, 2, 3):
        raise ConfigError(f"study must be 1, 2 or 3, got {cfg.study}")
    if not 1 <= cfg.n_train < cfg.n_subjects:
        raise ConfigError(f"need 1 <= n_train < n_subjects, got {cfg.n_train} and {cfg.n_subjects}")
    if not cfg.methods or len(set(cfg.methods)) != len(cfg.methods):
        raise ConfigError(f"methods must be a non-empty list without repetitions, got {cfg.methods}")
    unknown = [m for m in cfg.methods if m not in config.all_methods]
    if unknown:
        raise ConfigError(f"unknown methods {unknown}, expected some of {list(config.all_methods)}")
    if any(m.startswith('V') for m in cfg.methods) and cfg.patch_size < config.receptive_field_depth20:
        raise ConfigError(f"patch size {cfg.patch_size} smaller than the {config.receptive_field_depth20} pixel receptive field of the 20-layer networks")
    if cfg.patch_size > min(cfg.phantom_dims[:2]) or cfg.patch_size < 1 or cfg.patch_stride < 1:
        raise ConfigError(f"invalid patch size/stride {cfg.patch_size}/{cfg.patch_stride} for images of {cfg.phantom_dims[:2]}")
    if cfg.n_angles % cfg.osem_subsets != 0:
        raise ConfigError(f"{cfg.osem_subsets} subsets do not divide {cfg.n_angles} angles")
    if cfg.counts_per_slice <= 0 or cfg.epochs < 0 or cfg.batch_size < 1 or cfg.filters < 1:
        raise ConfigError("counts, epochs, batch size and filters must be positive")
    if cfg.precision not in ('float32', 'float64'):
        raise ConfigError(f"precision must be float32 or float64, got {cfg.precision}")
    if cfg.psf_file and not os.path.isfile(cfg.psf_file):
        raise ConfigError(f"PSF model file {cfg.psf_file} not found")
    check_fov(cfg.lr_geometry(), cfg.phantom_dims[:2], cfg.phantom_voxel_mm)
    check_fov(cfg.lr_geometry(), cfg.lr_recon_dims, cfg.lr_recon_voxel_mm)


@dataclass(eq=False)
class SubjectCase:
    """One subject on the HR grid: network input, training target, MR and (Studies 1-2) the true PET"""
    subject: int
    lr: ImageGrid
    mr: ImageGrid
    target: Optional[ImageGrid] = None
    truth: Optional[ImageGrid] = None
    labels: Optional[LabelGrid] = None


class NormRecord(NamedTuple):
    pet_scale: float
    mr_scale: float


def _subject_seeds(seed: int, n_subjects: int) -> np.ndarray:
    """Four independent seeds per subject: phantom, MR noise, LR scan, HR scan"""
    return np.random.SeedSequence(seed).generate_state(4 * n_subjects).reshape(n_subjects, 4)


def _float32_rounded(image: ImageGrid) -> ImageGrid:
    """The image exactly as it will be stored on disk"""
    return image.like(image.data.astype(np.float32).astype(np.float64))


def synthesize_subject(cfg: StudyConfig, subject: int, seeds: np.ndarray) -> SubjectCase:
    phantom_seed, mr_seed, lr_seed, hr_seed = (int(s) for s in seeds)
    table = default_tissue_table()
    labels = generate_phantom(phantom_seed, cfg.phantom_dims, cfg.phantom_voxel_mm, cfg.variability)
    truth = labels_to_activity(labels, table)
    mr = labels_to_mr(labels, table, mr_seed)
    model = cfg.psf_model()

    target = truth
    if cfg.study in (2, 3):
        hr_recon = simulate_scan(truth, cfg.hr_geometry(), cfg.counts_per_slice, hr_seed, n_iterations=cfg.osem_iterations, n_subsets=cfg.osem_subsets)
        target = _float32_rounded(gaussian_filter(hr_recon, cfg.hr_post_filter_fwhm_mm))
        target.description = 'HR-like target'
    if cfg.study in (1, 2):
        lr_recon = simulate_scan(truth, cfg.lr_geometry(), cfg.counts_per_slice, lr_seed, recon_dims=cfg.lr_recon_dims,
                                 recon_voxel_mm=cfg.lr_recon_voxel_mm, n_iterations=cfg.osem_iterations, n_subsets=cfg.osem_subsets)
        lr = resample_bicubic(apply_spatially_variant_blur(lr_recon, model), cfg.phantom_dims, cfg.phantom_voxel_mm)
    else:
        lr = apply_spatially_variant_blur(target, model)
    lr.description = 'LR input'
    logger.info("subject %s of study %s synthesised", subject, cfg.study)
    return SubjectCase(subject, lr, mr, target, truth if cfg.study in (1, 2) else None, labels)


def split_subjects(cfg: StudyConfig) -> Tuple[List[int], List[int]]:
    order = np.random.default_rng(cfg.seed).permutation(cfg.n_subjects)
    return sorted(int(s) for s in order[:cfg.n_train]), sorted(int(s) for s in order[cfg.n_train:])


def make_study_dataset(cfg: StudyConfig) -> Tuple[List[SubjectCase], List[SubjectCase]]:
    validate_study_config(cfg)
    seeds = _subject_seeds(cfg.seed, cfg.n_subjects)
    train_ids, val_ids = split_subjects(cfg)
    cases = {subject: synthesize_subject(cfg, subject, seeds[subject]) for subject in sorted(train_ids + val_ids)}
    logger.info("study %s dataset: %s training and %s validation subjects", cfg.study, len(train_ids), len(val_ids))
    return [cases[s] for s in train_ids], [cases[s] for s in val_ids]


def normalize_case(case: SubjectCase) -> Tuple[SubjectCase, NormRecord]:
    """Common PET scale 1 / max(LR) for input, target and truth; MR scaled to [0, 1] on its own"""
    lr_max = float(case.lr.data.max())
    if lr_max <= 0:
        raise ValueError(f"subject {case.subject}: LR image is all zero, cannot normalise")
    mr_max = float(case.mr.data.max())
    record = NormRecord(1.0 / lr_max, 1.0 / mr_max if mr_max > 0 else 1.0)
    mr_divisor = mr_max if mr_max > 0 else 1.0

    # dividing by the maximum makes max(LR) exactly 1
    def scaled(image, divisor):
        return None if image is None else image.like(image.data / divisor)

    normalized = SubjectCase(case.subject, scaled(case.lr, lr_max), scaled(case.mr, mr_divisor),
                             scaled(case.target, lr_max), scaled(case.truth, lr_max), case.labels)
    return normalized, record


def denormalize(image: ImageGrid, record: NormRecord) -> ImageGrid:
    return image.like(image.data / record.pet_scale)


def training_view(case: SubjectCase) -> SubjectCase:
    """The case without its true PET: training and beta selection only see input, MR and target"""
    return replace(case, truth=None)


def coordinate_maps(image: ImageGrid) -> Tuple[np.ndarray, np.ndarray, float]:
    """Radial channel r / R_max, axial channel z / (nz - 1) and R_max (mm), with R_max the centre-to-corner distance"""
    nx, ny, nz = image.dims
    vx, vy, _ = image.voxel_size_mm
    cx, cy = (nx - 1) / 2, (ny - 1) / 2
    radius_max = float(np.hypot(cx * vx, cy * vy)) or 1.0
    y, x = np.meshgrid(np.arange(ny), np.arange(nx), indexing='ij')
    radial = np.hypot((x - cx) * vx, (y - cy) * vy) / radius_max
    axial = np.arange(nz) / (nz - 1) if nz > 1 else np.zeros(1)
    return radial, axial, radius_max


def case_inputs(case: SubjectCase, inputs: Tuple[str, ...]) -> np.ndarray:
    """Full-image input tensor (nz, channels, ny, nx) with the channels in network order"""
    nx, ny, nz = case.lr.dims
    radial, axial, _ = coordinate_maps(case.lr)
    if case.mr.data.shape != case.lr.data.shape:
        raise ShapeError(f"MR dims {case.mr.dims} do not match LR dims {case.lr.dims}")
    channels = {config.LR_PET: lambda: case.lr.data,
                config.HR_MR: lambda: case.mr.data,
                config.RADIAL: lambda: np.broadcast_to(radial, (nz, ny, nx)),
                config.AXIAL: lambda: np.broadcast_to(axial[:, np.newaxis, np.newaxis], (nz, ny, nx))}
    unknown = [c for c in inputs if c not in channels]
    if unknown:
        raise ShapeError(f"unknown input channels {unknown}")
    return np.stack([channels[c]() for c in inputs], axis=1).astype(np.float64)


@dataclass(eq=False)
class PatchSet:
    inputs: np.ndarray
    targets: np.ndarray
    subjects: np.ndarray
    centers_mm: np.ndarray
    origins: np.ndarray
    channels: Tuple[str, ...]
    radius_max_mm: float = 1.0

    def __len__(self):
        return len(self.inputs)

    @classmethod
    def concat(cls, sets: List['PatchSet']) -> 'PatchSet':
        if not sets:
            raise ConfigError("no patch sets to concatenate")
        if len({s.channels for s in sets}) != 1:
            raise ShapeError("patch sets with different channels")
        return cls(np.concatenate([s.inputs for s in sets]), np.concatenate([s.targets for s in sets]),
                   np.concatenate([s.subjects for s in sets]), np.concatenate([s.centers_mm for s in sets]),
                   np.concatenate([s.origins for s in sets]), sets[0].channels, sets[0].radius_max_mm)

    def astype(self, dtype) -> 'PatchSet':
        return PatchSet(self.inputs.astype(dtype), self.targets.astype(dtype), self.subjects, self.centers_mm, self.origins,
                        self.channels, self.radius_max_mm)


def patch_starts(n: int, patch_size: int, stride: int) -> List[int]:
    """Regular starts with the last patch shifted to touch the border"""
    if patch_size > n:
        raise ShapeError(f"patch of {patch_size} larger than image dimension {n}")
    starts = list(range(0, n - patch_size + 1, stride))
    if starts[-1] + patch_size < n:
        starts.append(n - patch_size)
    return starts


def extract_patches(case: SubjectCase, spec: NetworkSpec, patch_size: int = config.patch_size,
                    stride: int = config.patch_stride) -> PatchSet:
    """
    Co-located input/target patches of every transverse slice; the target is the residual HR - LR.

    The stored centre of a patch is its pixel (patch_size // 2, patch_size // 2): its radius in mm and its axial
    offset from the grid centre in mm.
    """
    if case.target is None:
        raise ConfigError(f"subject {case.subject} has no target to extract training patches from")
    tensor = case_inputs(case, spec.inputs)
    residual = (case.target.data - case.lr.data)[:, np.newaxis]
    nx, ny, nz = case.lr.dims
    vx, vy, vz = case.lr.voxel_size_mm
    _, _, radius_max = coordinate_maps(case.lr)
    inputs, targets, centers, origins = [], [], [], []
    half = patch_size // 2
    for z in range(nz):
        for y0 in patch_starts(ny, patch_size, stride):
            for x0 in patch_starts(nx, patch_size, stride):
                inputs.append(tensor[z, :, y0:y0 + patch_size, x0:x0 + patch_size])
                targets.append(residual[z, :, y0:y0 + patch_size, x0:x0 + patch_size])
                radius = np.hypot((x0 + half - (nx - 1) / 2) * vx, (y0 + half - (ny - 1) / 2) * vy)
                centers.append((radius, (z - (nz - 1) / 2) * vz))
                origins.append((z, y0, x0))
    n = len(inputs)
    return PatchSet(np.stack(inputs), np.stack(targets), np.full(n, case.subject), np.array(centers, dtype=np.float64),
                    np.array(origins, dtype=np.int64), tuple(spec.inputs), radius_max)


def predict_residual(net: Network, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Slice by slice full-image prediction in float64 (fully convolutional, no patching)"""
    residuals, srs = [], []
    for z in range(len(inputs)):
        residual, sr = forward_sr(net, inputs[z:z + 1].astype(np.float64))
        residuals.append(residual)
        srs.append(sr)
    return np.concatenate(residuals)[:, 0], np.concatenate(srs)[:, 0]


def infer(checkpoint: Union[str, Network], case: SubjectCase) -> ImageGrid:
    """SR image of a subject: LR + predicted residual, computed on the normalised case and brought back to its units"""
    net = load_checkpoint(checkpoint)[0] if isinstance(checkpoint, str) else checkpoint
    normalized, record = normalize_case(case)
    _, sr = predict_residual(net, case_inputs(normalized, net.spec.inputs))
    # activity cannot be negative
    return ImageGrid(np.clip(sr / record.pet_scale, 0, None), case.lr.voxel_size_mm, Modality.PET, f"{net.spec.variant} SR")


def _deconvolve_case(case: SubjectCase, model: PsfModel, cfg: DeconvConfig) -> ImageGrid:
    normalized, record = normalize_case(case)
    try:
        image = penalized_deconvolve(normalized.lr, model, normalized.mr, cfg)
    except ConvergenceError as ex:
        logger.warning("subject %s: %s, keeping the last accepted iterate", case.subject, ex)
        image = ex.result.image
    return denormalize(image, record)


def _deconv_config(cfg: StudyConfig, penalty: str) -> DeconvConfig:
    return DeconvConfig(penalty=penalty, max_iters=cfg.deconv_max_iters, je=JeConfig(n_bins=cfg.je_bins))


def choose_beta(cfg: StudyConfig, penalty: str, train_cases: List[SubjectCase], model: PsfModel) -> float:
    """Configured beta, or the grid-search winner on the first training subject against its target"""
    configured = cfg.tv_beta if penalty == TV else cfg.je_beta
    if configured is not None:
        return configured
    normalized, _ = normalize_case(training_view(train_cases[0]))
    beta, _ = select_beta([(normalized.lr, normalized.mr, normalized.target)], model, _deconv_config(cfg, penalty))
    logger.info("%s beta selected: %s", penalty, beta)
    return beta


def train_variant(cfg: StudyConfig, variant: str, train_cases: List[SubjectCase], val_cases: List[SubjectCase],
                  checkpoint_dir: Optional[str] = None) -> Network:
    spec = network_spec(variant, cfg.filters)
    dtype = np.float32 if cfg.precision == 'float32' else np.float64

    def patches(cases):
        return PatchSet.concat([extract_patches(normalize_case(training_view(c))[0], spec, cfg.patch_size, cfg.patch_stride) for c in cases]).astype(dtype)

    seed = cfg.seed + config.all_methods.index(variant)
    net = build_network(spec, seed, dtype=dtype)
    validation = patches(val_cases) if val_cases else None
    net, history = train(net, patches(train_cases), TrainConfig(cfg.epochs, cfg.batch_size, cfg.learning_rate, seed), validation)
    if checkpoint_dir is not None:
        base = os.path.join(checkpoint_dir, variant)
        save_checkpoint(net, base, seed, cfg.epochs)
        write_history(history, f"{base}_history.csv")
        # inference always runs on the stored 32-bit weights
        net = load_checkpoint(base)[0]
    return net


def references(cfg: StudyConfig, case: SubjectCase) -> Dict[str, ImageGrid]:
    available = {'true': case.truth, 'target': case.target}
    return {name: available[name] for name in config.study_references[cfg.study]}  # type: ignore[misc]


def _run_method(method: str, cfg: StudyConfig, train_cases: List[SubjectCase], val_cases: List[SubjectCase],
                model: PsfModel, folders: Dict[str, str], metadata: Dict) -> Dict[int, ImageGrid]:
    if method == 'LR':
        return {c.subject: c.lr for c in val_cases}
    if method in (TV, JE):
        beta = choose_beta(cfg, method, train_cases, model)
        metadata.setdefault('betas', {})[method] = beta
        deconv_cfg = _deconv_config(cfg, method)._replace(beta=beta)
        return {c.subject: _deconvolve_case(c, model, deconv_cfg) for c in val_cases}
    net = train_variant(cfg, method, train_cases, val_cases, folders['checkpoints'])
    return {c.subject: infer(net, c) for c in val_cases}


def _study_folders(output_dir: str) -> Dict[str, str]:
    ensure_folder(output_dir)
    return {name: ensure_folder(os.path.join(output_dir, name)) for name in config.study_subfolders}


def write_cases(cases: List[SubjectCase], folder: str):
    for case in cases:
        for name in ('lr', 'mr', 'target', 'truth'):
            image = getattr(case, name)
            if image is not None:
                write_volume(image, os.path.join(folder, f"subject{case.subject:02d}_{name}"))
        if case.labels is not None:
            write_volume(case.labels.to_grid(), os.path.join(folder, f"subject{case.subject:02d}_labels"))


def _zoom_box(image: ImageGrid) -> Tuple[int, int, int]:
    """Square (y0, x0, size) around the upper-left quadrant of the head, a quarter of the in-plane size"""
    nx, ny, _ = image.dims
    size = max(min(nx, ny) // 4, 2)
    return ny // 2 - size, nx // 2 - size, size


def write_panels(case: SubjectCase, outputs: Dict[str, ImageGrid], reference: ImageGrid, path: str):
    """MR, reference and every method on the central slice, with a magnified sub-image row underneath"""
    z = case.lr.dims[2] // 2
    images = [('MR', case.mr), ('HR', reference)] + list(outputs.items())
    y0, x0, size = _zoom_box(case.lr)
    vmax = float(reference.data[z].max()) or 1.0
    fig, axes = plt.subplots(2, len(images), figsize=(2.2 * len(images), 4.6), squeeze=False)
    for column, (title, image) in enumerate(images):
        plane = image.data[z]
        top = (float(plane.max()) or 1.0) if title == 'MR' else vmax
        axes[0, column].imshow(plane, cmap='gray', vmin=0, vmax=top)
        axes[0, column].set_title(title)
        axes[1, column].imshow(plane[y0:y0 + size, x0:x0 + size], cmap='gray', vmin=0, vmax=top)
        for ax in axes[:, column]:
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].add_patch(Rectangle((x0 - 0.5, y0 - 0.5), size, size, fill=False, edgecolor='yellow'))
    fig.tight_layout()
    logger.info('writing file %s', path)
    fig.savefig(path)
    plt.close(fig)


def run_study(cfg: StudyConfig) -> MetricsReport:
    """
    Run every method of `cfg.methods` on the validation subjects and evaluate it against the study's references.

    A failing method is logged and reported with status 'failed' and NaN metrics; the other methods still run
    and the report is always written.
    """
    validate_study_config(cfg)
    folders = _study_folders(cfg.output_dir)
    train_cases, val_cases = make_study_dataset(cfg)
    model = cfg.psf_model()
    write_cases(val_cases, folders['volumes'])
    metadata = {'study': cfg.study, 'seed': cfg.seed, 'config_hash': cfg.config_hash(), 'methods': list(cfg.methods),
                'train_subjects': [c.subject for c in train_cases], 'val_subjects': [c.subject for c in val_cases]}
    rows: List[Dict] = []
    outputs: Dict[str, Dict[int, ImageGrid]] = {}
    try:
        for method in cfg.methods:
            try:
                outputs[method] = _run_method(method, cfg, train_cases, val_cases, model, folders, metadata)
                for case in val_cases:
                    estimate = outputs[method][case.subject]
                    write_volume(estimate, os.path.join(folders['volumes'], f"subject{case.subject:02d}_{method}"))
                    mask = brain_mask(case.labels) if cfg.use_mask and case.labels is not None else None
                    for reference, image in references(cfg, case).items():
                        rows.append({'method': method, 'reference': reference, 'subject': case.subject, 'status': 'ok',
                                     **evaluate(estimate, image, mask)})
            except Exception:
                logger.error("Error while processing %s for study %s", method, cfg.study, exc_info=True)
                outputs.pop(method, None)
                rows = [r for r in rows if r['method'] != method]
                for case in val_cases:
                    for reference in config.study_references[cfg.study]:
                        rows.append({'method': method, 'reference': reference, 'subject': case.subject, 'status': 'failed',
                                     'psnr': np.nan, 'ssim': np.nan, 'rmse': np.nan})
    finally:
        report = MetricsReport.from_per_subject(rows, metadata)
        report.to_csv(os.path.join(cfg.output_dir, 'report.csv'))
        report.to_json(os.path.join(cfg.output_dir, 'report.json'))
    if cfg.panels and outputs:
        try:
            case = val_cases[0]
            reference = references(cfg, case)[config.study_references[cfg.study][0]]
            panel_outputs = {m: outputs[m][case.subject] for m in cfg.methods if m in outputs}
            write_panels(case, panel_outputs, reference, os.path.join(folders['png'], f"subject{case.subject:02d}_panels.png"))
            z = case.lr.dims[2] // 2
            window = (0.0, float(reference.data.max()) or 1.0)
            for method, image in panel_outputs.items():
                export_slice_png(image, 'z', z, window, os.path.join(folders['png'], f"subject{case.subject:02d}_{method}.png"))
        except Exception:
            logger.error("Error while processing panels for study %s", cfg.study, exc_info=True)
    logger.info("study %s finished: %s", cfg.study, ', '.join(f"{m}" for m in cfg.methods))
    return report
