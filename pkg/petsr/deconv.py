"""Deconv

Classical baselines: penalised deconvolution of the LR PET with the spatially-variant PSF, using either a total
variation penalty or an MR-guided joint entropy penalty.

The solver minimises F(x) = 1/2 ||Bx - lr||^2 + beta * penalty(x) over x >= 0 by projected gradient descent
with a backtracking line search, B being the gather blur of `psf.SpatiallyVariantBlur`.
"""

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple, List, Sequence, Dict
import numpy as np
from petsr import config
from petsr.common import ConfigError, ShapeError, ConvergenceError
from petsr.metrics import psnr
from petsr.psf import PsfModel, SpatiallyVariantBlur
from petsr.volume import ImageGrid

logger = logging.getLogger(__name__)

TV, JE = 'TV', 'JE'
PENALTIES = (TV, JE)
P_FLOOR = 1e-12


class JeConfig(NamedTuple):
    n_bins: int = config.je_bins
    parzen_sigma_u: float = config.je_parzen_sigma
    parzen_sigma_v: float = config.je_parzen_sigma
    u_range: Optional[Tuple[float, float]] = None
    v_range: Optional[Tuple[float, float]] = None


class DeconvConfig(NamedTuple):
    penalty: str = TV
    beta: float = 0.0
    max_iters: int = config.deconv_max_iters
    tv_epsilon: Optional[float] = None
    initial_step: float = 1.0
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    tolerance: float = config.deconv_tolerance
    min_step: float = 1e-14
    je: JeConfig = JeConfig()


@dataclass
class DeconvResult:
    image: ImageGrid
    objective: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    reason: str = ''


def validate_je_config(cfg: JeConfig):
    if cfg.n_bins < 2:
        raise ConfigError(f"joint entropy needs at least 2 bins, got {cfg.n_bins}")
    if cfg.parzen_sigma_u <= 0 or cfg.parzen_sigma_v <= 0:
        raise ConfigError(f"Parzen sigmas must be positive, got {cfg.parzen_sigma_u}, {cfg.parzen_sigma_v}")
    for bounds in (cfg.u_range, cfg.v_range):
        if bounds is not None and not bounds[1] > bounds[0]:
            raise ConfigError(f"degenerate intensity range {bounds}")


def validate_deconv_config(cfg: DeconvConfig):
    if cfg.penalty not in PENALTIES:
        raise ConfigError(f"penalty must be one of {PENALTIES}, got {cfg.penalty}")
    if not np.isfinite(cfg.beta) or cfg.beta < 0:
        raise ConfigError(f"beta must be finite and non-negative, got {cfg.beta}")
    if cfg.max_iters < 1:
        raise ConfigError(f"max_iters must be >= 1, got {cfg.max_iters}")
    if cfg.tv_epsilon is not None and cfg.tv_epsilon <= 0:
        raise ConfigError(f"tv_epsilon must be positive, got {cfg.tv_epsilon}")
    if not 0 < cfg.shrink < 1 or cfg.initial_step <= 0 or cfg.sufficient_decrease < 0:
        raise ConfigError("invalid line search parameters")
    if cfg.penalty == JE:
        validate_je_config(cfg.je)


# total variation

def _differences(data: np.ndarray):
    """Forward differences along every axis longer than one voxel; boundary differences are omitted"""
    return [(axis, np.diff(data, axis=axis)) for axis in range(data.ndim) if data.shape[axis] > 1]


def tv_penalty(x: ImageGrid, epsilon: float = 0.0) -> float:
    """sum over axes and voxels of sqrt(t^2 + eps^2) - eps; the plain L1 total variation for eps = 0"""
    total = 0.0
    for _, t in _differences(x.data):
        total += float(np.sum(np.sqrt(t * t + epsilon * epsilon) - epsilon))
    return total


def tv_gradient(x: ImageGrid, epsilon: float = 0.0) -> ImageGrid:
    grad = np.zeros_like(x.data)
    for axis, t in _differences(x.data):
        norm = np.sqrt(t * t + epsilon * epsilon)
        psi = np.divide(t, norm, out=np.zeros_like(t), where=norm > 0)
        lower = [slice(None)] * grad.ndim
        upper = [slice(None)] * grad.ndim
        lower[axis] = slice(0, -1)
        upper[axis] = slice(1, None)
        grad[tuple(lower)] -= psi
        grad[tuple(upper)] += psi
    return x.like(grad, description='TV gradient')


# joint entropy

def _bin_centres(values: np.ndarray, bounds: Optional[Tuple[float, float]], n_bins: int):
    lo, hi = (0.0, float(values.max())) if bounds is None else (float(bounds[0]), float(bounds[1]))
    if not hi > lo:
        raise ConfigError(f"degenerate intensity range [{lo}, {hi}] for joint entropy bins")
    width = (hi - lo) / (n_bins - 1)
    return lo + width * np.arange(n_bins), width


def _parzen(values: np.ndarray, centres: np.ndarray, sigma: float):
    """Per-voxel normalised Gaussian weights (bins x voxels) and their derivative w.r.t. the voxel value"""
    d = centres[:, np.newaxis] - values[np.newaxis, :]
    exponent = -0.5 * d * d / (sigma * sigma)
    weights = np.exp(exponent - exponent.max(axis=0))
    weights /= weights.sum(axis=0)
    slope = d / (sigma * sigma)
    derivative = weights * (slope - np.sum(weights * slope, axis=0))
    return weights, derivative


def _je_terms(x: ImageGrid, y: ImageGrid, cfg: JeConfig):
    if x.data.shape != y.data.shape:
        raise ShapeError(f"joint entropy needs images of equal dims, got {x.dims} and {y.dims}")
    validate_je_config(cfg)
    u = x.data.ravel()
    v = y.data.ravel()
    u_centres, du = _bin_centres(u, cfg.u_range, cfg.n_bins)
    v_centres, dv = _bin_centres(v, cfg.v_range, cfg.n_bins)
    a, a_prime = _parzen(u, u_centres, cfg.parzen_sigma_u * du)
    b, _ = _parzen(v, v_centres, cfg.parzen_sigma_v * dv)
    n = u.size
    p = (a @ b.T) / (n * du * dv)
    return p, du, dv, a_prime, b, n


def joint_density(x: ImageGrid, y: ImageGrid, cfg: JeConfig = JeConfig()) -> np.ndarray:
    """Parzen estimate of the joint PET/MR density on the (n_bins x n_bins) grid of bin centres"""
    return _je_terms(x, y, cfg)[0]


def je_penalty(x: ImageGrid, y: ImageGrid, cfg: JeConfig = JeConfig()) -> float:
    p, du, dv, _, _, _ = _je_terms(x, y, cfg)
    kept = p >= P_FLOOR
    return float(-du * dv * np.sum(p[kept] * np.log(p[kept])))


def je_gradient(x: ImageGrid, y: ImageGrid, cfg: JeConfig = JeConfig()) -> ImageGrid:
    """Gradient w.r.t. x with the bin ranges held fixed (pass explicit ranges when they would move with x)"""
    p, du, dv, a_prime, b, n = _je_terms(x, y, cfg)
    kept = p >= P_FLOOR
    dphi_dp = np.where(kept, np.log(np.where(kept, p, 1.0)) + 1, 0.0)
    # dphi/dx_k = -(1/N) sum_ij (log p_ij + 1) a'_ik b_jk
    grad = -np.sum(a_prime * (dphi_dp @ b), axis=0) / n
    return x.like(grad.reshape(x.data.shape), description='JE gradient')


# solver

class _Objective:

    def __init__(self, lr: ImageGrid, blur: SpatiallyVariantBlur, mr: Optional[ImageGrid], cfg: DeconvConfig):
        self.lr = lr
        self.blur = blur
        self.mr = mr
        self.cfg = cfg
        if cfg.penalty == TV:
            dynamic_range = float(lr.data.max() - lr.data.min())
            self.epsilon = cfg.tv_epsilon or config.tv_epsilon_factor * (dynamic_range if dynamic_range > 0 else 1.0)
        else:
            # PET bins span [0, max(LR)] for the whole run, not the current iterate's max, so the penalty stays smooth in x
            self.je = cfg.je._replace(u_range=cfg.je.u_range or (0.0, float(lr.data.max())),
                                      v_range=cfg.je.v_range or (0.0, float(mr.data.max())))  # type: ignore[union-attr]

    def penalty(self, x: ImageGrid) -> float:
        if self.cfg.beta == 0:
            return 0.0
        if self.cfg.penalty == TV:
            return tv_penalty(x, self.epsilon)
        return je_penalty(x, self.mr, self.je)  # type: ignore[arg-type]

    def penalty_gradient(self, x: ImageGrid) -> np.ndarray:
        if self.cfg.beta == 0:
            return np.zeros_like(x.data)
        if self.cfg.penalty == TV:
            return tv_gradient(x, self.epsilon).data
        return je_gradient(x, self.mr, self.je).data  # type: ignore[arg-type]

    def value(self, x: np.ndarray) -> float:
        residual = self.blur.forward(x) - self.lr.data
        return 0.5 * float(np.sum(residual * residual)) + self.cfg.beta * self.penalty(self.lr.like(x))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        residual = self.blur.forward(x) - self.lr.data
        return self.blur.adjoint(residual) + self.cfg.beta * self.penalty_gradient(self.lr.like(x))


def run_deconvolution(lr: ImageGrid, model: PsfModel, mr: Optional[ImageGrid] = None, cfg: DeconvConfig = DeconvConfig(),
                      init: Optional[ImageGrid] = None) -> DeconvResult:
    """
    Projected gradient descent with backtracking on 1/2 ||Bx - lr||^2 + beta * penalty(x), x >= 0.

    A step of length `alpha` is accepted when F(x_new) <= F(x) - (c / alpha) ||x_new - x||^2; after an
    accepted step the next trial length grows by 1 / shrink. Stops after `max_iters` iterations, when the
    relative change of the objective drops below `tolerance` or when the projected step vanishes.

    Raises
    ------
    ConvergenceError: the trial step fell below `min_step` without a decrease; `result` holds the last
        accepted iterate
    """
    validate_deconv_config(cfg)
    if cfg.penalty == JE:
        if mr is None:
            raise ConfigError("joint entropy deconvolution needs an MR image")
        if mr.data.shape != lr.data.shape:
            raise ShapeError(f"MR dims {mr.dims} do not match LR dims {lr.dims}")
    objective = _Objective(lr, SpatiallyVariantBlur(model, lr), mr, cfg)
    x = np.clip((init or lr).data, 0, None)
    value = objective.value(x)
    result = DeconvResult(lr.like(x), [value])
    alpha = cfg.initial_step
    for iteration in range(1, cfg.max_iters + 1):
        grad = objective.gradient(x)
        while True:
            candidate = np.clip(x - alpha * grad, 0, None)
            step = candidate - x
            step_norm = float(np.sum(step * step))
            if step_norm == 0:
                result.iterations, result.converged, result.reason = iteration, True, 'zero projected step'
                logger.info("%s deconvolution converged after %s iterations: %s", cfg.penalty, iteration, result.reason)
                return result
            candidate_value = objective.value(candidate)
            if candidate_value <= value - cfg.sufficient_decrease / alpha * step_norm:
                break
            alpha *= cfg.shrink
            if alpha < cfg.min_step:
                result.iterations, result.reason = iteration, 'step underflow'
                logger.warning("%s deconvolution line search failed at iteration %s", cfg.penalty, iteration)
                raise ConvergenceError(f"line search step underflow at iteration {iteration}", result)
        change = abs(value - candidate_value) / max(abs(value), np.finfo(np.float64).tiny)
        x, value = candidate, candidate_value
        result.image = lr.like(x)
        result.objective.append(value)
        result.iterations = iteration
        alpha /= cfg.shrink
        if change < cfg.tolerance:
            result.converged, result.reason = True, 'relative objective change below tolerance'
            break
    else:
        result.reason = 'max iterations'
    logger.info("%s deconvolution (beta=%s) stopped after %s iterations: %s", cfg.penalty, cfg.beta, result.iterations, result.reason)
    return result


def penalized_deconvolve(lr: ImageGrid, model: PsfModel, mr: Optional[ImageGrid] = None, cfg: DeconvConfig = DeconvConfig(),
                         init: Optional[ImageGrid] = None) -> ImageGrid:
    return run_deconvolution(lr, model, mr, cfg, init).image


def select_beta(cases: Sequence[Tuple[ImageGrid, Optional[ImageGrid], ImageGrid]], model: PsfModel, cfg: DeconvConfig,
                candidates: Optional[Sequence[float]] = None) -> Tuple[float, Dict[float, float]]:
    """
    Grid search of beta maximising the mean PSNR over tuning cases.

    Parameters
    ----------
    cases: (lr, mr, reference) triples
    model: PSF used for the deconvolution
    cfg: solver settings; its beta is ignored
    candidates: betas to try, `config.beta_candidates[cfg.penalty]` by default

    Returns
    -------
    best beta and the mean PSNR of every candidate
    """
    if not cases:
        raise ConfigError("beta selection needs at least one tuning case")
    candidates = candidates or config.beta_candidates[cfg.penalty]
    scores = {}
    for beta in candidates:
        values = []
        for lr, mr, reference in cases:
            try:
                image = penalized_deconvolve(lr, model, mr, cfg._replace(beta=beta))
            except ConvergenceError as ex:
                image = ex.result.image
            values.append(psnr(image, reference))
        scores[beta] = float(np.mean(values))
        logger.info("%s beta %s: mean PSNR %.3f dB", cfg.penalty, beta, scores[beta])
    best = max(scores, key=lambda b: scores[b])
    return best, scores
