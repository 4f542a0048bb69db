import math
from unittest.mock import patch
import numpy as np
import pytest
import petsr.deconv as pd_
from petsr.common import ConfigError, ConvergenceError
from petsr.psf import make_constant_model, apply_spatially_variant_blur
from petsr.volume import ImageGrid, Modality


def disk(n=16, radius=5.0, value=1.0):
    y, x = np.mgrid[0:n, 0:n]
    centre = (n - 1) / 2
    return ImageGrid(np.where((x - centre) ** 2 + (y - centre) ** 2 <= radius ** 2, value, 0.1), (1.0, 1.0, 1.0), Modality.PET)


def blurred_case(seed=0):
    truth = disk()
    model = make_constant_model(1.2)
    lr = apply_spatially_variant_blur(truth, model)
    noise = np.random.default_rng(seed).normal(0, 0.02, size=lr.data.shape)
    lr = lr.like(np.clip(lr.data + noise, 0, None))
    mr = truth.like(np.where(truth.data > 0.5, 0.9, 0.3), modality=Modality.MR)
    return truth, lr, mr, model


def test_tv_of_a_constant_image_is_zero():
    image = ImageGrid(np.full((3, 4, 5), 2.0))
    assert pd_.tv_penalty(image) == 0
    assert not pd_.tv_gradient(image, 0.1).data.any()


def test_tv_of_a_vertical_edge():
    """
    0 1
    0 1
    """
    image = ImageGrid(np.array([[0.0, 1.0], [0.0, 1.0]]))
    assert pd_.tv_penalty(image) == 2.0
    assert pd_.tv_penalty(image, 1e-3) == pytest.approx(2 * (math.sqrt(1 + 1e-6) - 1e-3))


def test_tv_gradient_matches_finite_differences():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    epsilon = 0.1
    analytic = pd_.tv_gradient(ImageGrid(x), epsilon).data[0]
    numeric = np.zeros_like(x)
    h = 1e-6
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (pd_.tv_penalty(ImageGrid(plus), epsilon) - pd_.tv_penalty(ImageGrid(minus), epsilon)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-7)


def test_joint_entropy_of_identical_binary_images():
    """half the voxels at 0 and half at 1 in both images: two occupied cells"""
    cfg = pd_.JeConfig(n_bins=2, parzen_sigma_u=1e-3, parzen_sigma_v=1e-3)
    x = ImageGrid(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert pd_.je_penalty(x, x, cfg) == pytest.approx(math.log(2), rel=1e-9)


def test_joint_entropy_of_independent_binary_images():
    cfg = pd_.JeConfig(n_bins=2, parzen_sigma_u=1e-3, parzen_sigma_v=1e-3)
    x = ImageGrid(np.array([[0.0, 1.0], [0.0, 1.0]]))
    y = ImageGrid(np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert pd_.je_penalty(x, y, cfg) == pytest.approx(math.log(4), rel=1e-9)


def test_joint_density_integrates_to_one():
    rng = np.random.default_rng(1)
    x = ImageGrid(rng.uniform(size=(10, 10)))
    y = ImageGrid(rng.uniform(size=(10, 10)))
    cfg = pd_.JeConfig(n_bins=16, u_range=(0.0, 1.0), v_range=(0.0, 1.0))
    width = 1.0 / 15
    assert pd_.joint_density(x, y, cfg).sum() * width * width == pytest.approx(1.0)


def test_je_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.uniform(0.1, 0.9, size=(8, 8))
    y = ImageGrid(rng.uniform(0.1, 0.9, size=(8, 8)))
    cfg = pd_.JeConfig(n_bins=8, u_range=(0.0, 1.0), v_range=(0.0, 1.0))
    analytic = pd_.je_gradient(ImageGrid(x), y, cfg).data[0]
    numeric = np.zeros_like(x)
    h = 1e-6
    for index in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[index] += h
        minus[index] -= h
        numeric[index] = (pd_.je_penalty(ImageGrid(plus), y, cfg) - pd_.je_penalty(ImageGrid(minus), y, cfg)) / (2 * h)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_joint_entropy_prefers_aligned_images():
    labels = np.repeat(np.arange(4), 16).reshape(8, 8).astype(float)
    x = ImageGrid(labels * 0.3)
    y = ImageGrid(labels * 0.2 + 0.1)
    cfg = pd_.JeConfig(n_bins=16)
    aligned = pd_.je_penalty(x, y, cfg)
    rng = np.random.default_rng(3)
    for _ in range(10):
        scrambled = ImageGrid(rng.permutation(x.data.ravel()).reshape(8, 8))
        assert aligned < pd_.je_penalty(scrambled, y, cfg)


def test_unpenalised_deconvolution_fits_the_data():
    truth = disk()
    model = make_constant_model(1.2)
    lr = apply_spatially_variant_blur(truth, model)
    result = pd_.run_deconvolution(lr, model, cfg=pd_.DeconvConfig(beta=0.0, max_iters=500, tolerance=0.0))

    objective = result.objective
    assert all(b <= a for a, b in zip(objective, objective[1:]))
    residual = apply_spatially_variant_blur(result.image, model).data - lr.data
    assert np.sum(residual ** 2) / np.sum(lr.data ** 2) < 1e-4
    assert result.image.data.min() >= 0


def test_tiny_psf_keeps_the_input():
    _, lr, _, _ = blurred_case()
    result = pd_.penalized_deconvolve(lr, make_constant_model(1e-3), cfg=pd_.DeconvConfig(beta=0.0, max_iters=5))
    np.testing.assert_allclose(result.data, lr.data, atol=1e-12)


def test_strong_tv_flattens_the_image():
    _, lr, _, model = blurred_case()
    cfg = pd_.DeconvConfig(penalty=pd_.TV, beta=1.0, tv_epsilon=1e-2, max_iters=30)
    result = pd_.penalized_deconvolve(lr, model, cfg=cfg)
    assert pd_.tv_penalty(result) < pd_.tv_penalty(lr)


def test_je_deconvolution_decreases_the_objective():
    _, lr, mr, model = blurred_case()
    cfg = pd_.DeconvConfig(penalty=pd_.JE, beta=0.05, max_iters=15, je=pd_.JeConfig(n_bins=16))
    result = pd_.run_deconvolution(lr, model, mr, cfg)

    assert result.iterations >= 1
    assert all(b <= a for a, b in zip(result.objective, result.objective[1:]))
    assert result.image.data.min() >= 0


def test_je_bins_are_fixed_by_the_input_images():
    _, lr, mr, model = blurred_case()
    objective = pd_._Objective(lr, pd_.SpatiallyVariantBlur(model, lr), mr, pd_.DeconvConfig(penalty=pd_.JE, beta=0.1))
    assert objective.je.u_range == (0.0, float(lr.data.max()))
    assert objective.je.v_range == (0.0, float(mr.data.max()))

    overshoot = lr.like(lr.data * 3.0)
    assert objective.penalty(overshoot) == pd_.je_penalty(overshoot, mr, objective.je)


def test_je_needs_an_mr_image():
    _, lr, _, model = blurred_case()
    with pytest.raises(ConfigError):
        pd_.run_deconvolution(lr, model, None, pd_.DeconvConfig(penalty=pd_.JE, beta=0.1))


def test_invalid_settings():
    _, lr, _, model = blurred_case()
    with pytest.raises(ConfigError):
        pd_.run_deconvolution(lr, model, cfg=pd_.DeconvConfig(beta=-1.0))
    with pytest.raises(ConfigError):
        pd_.run_deconvolution(lr, model, cfg=pd_.DeconvConfig(penalty='L2'))


def test_line_search_failure_keeps_the_last_iterate():
    _, lr, _, model = blurred_case()
    values = iter(range(1000))

    with patch.object(pd_._Objective, 'value', side_effect=lambda x: float(next(values))):
        with pytest.raises(ConvergenceError) as raised:
            pd_.run_deconvolution(lr, model, cfg=pd_.DeconvConfig(beta=0.0, min_step=1e-3))

    result = raised.value.result
    assert result.reason == 'step underflow'
    assert result.objective == [0.0]
    np.testing.assert_array_equal(result.image.data, lr.data)


def test_select_beta_returns_the_best_candidate():
    truth, lr, mr, model = blurred_case()
    cfg = pd_.DeconvConfig(penalty=pd_.TV, max_iters=10)
    best, scores = pd_.select_beta([(lr, mr, truth)], model, cfg, candidates=[1e-3, 1e-2, 1e-1])

    assert set(scores) == {1e-3, 1e-2, 1e-1}
    assert scores[best] == max(scores.values())
