import os
import shutil
import numpy as np
import pytest
import petsr.nn as pn
from petsr.common import ConfigError, ShapeError

TEST_FOLDER = "tests/temp_nn"


@pytest.fixture(scope='module')
def folder():
    os.mkdir(TEST_FOLDER)
    yield TEST_FOLDER
    shutil.rmtree(TEST_FOLDER)


class Patches:

    def __init__(self, inputs, targets):
        self.inputs = inputs
        self.targets = targets


def single_filter(kernel, bias=0.0):
    return pn.ConvLayer(np.asarray(kernel, dtype=float).reshape(1, 1, 3, 3), np.array([bias]))


def test_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    identity = np.zeros((3, 3))
    identity[1, 1] = 1
    np.testing.assert_array_equal(pn.conv2d_forward(x, single_filter(identity)), x)


def test_zero_kernel_gives_the_bias():
    out = pn.conv2d_forward(np.ones((1, 1, 4, 4)), single_filter(np.zeros((3, 3)), bias=0.25))
    assert np.all(out == 0.25)


def test_ones_kernel_counts_the_neighbours():
    """
    4 6 4
    6 9 6
    4 6 4
    """
    out = pn.conv2d_forward(np.ones((1, 1, 3, 3)), single_filter(np.ones((3, 3))))
    assert out[0, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        pn.conv2d_forward(np.ones((1, 2, 4, 4)), single_filter(np.ones((3, 3))))


def test_conv_backward_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 5, 5))
    layer = pn.ConvLayer(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    projection = rng.normal(size=(2, 3, 5, 5))
    grad_x, grad_w, grad_b = pn.conv2d_backward(x, layer, projection)

    def loss():
        return float(np.sum(pn.conv2d_forward(x, layer) * projection))

    h = 1e-6
    for array, grad in ((x, grad_x), (layer.weights, grad_w), (layer.bias, grad_b)):
        numeric = np.zeros_like(array)
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + h
            plus = loss()
            array[index] = original - h
            minus = loss()
            array[index] = original
            numeric[index] = (plus - minus) / (2 * h)
        np.testing.assert_allclose(grad, numeric, rtol=1e-6, atol=1e-8)


def test_conv_backward_of_the_identity_kernel():
    identity = np.zeros((3, 3))
    identity[1, 1] = 1
    grad_out = np.random.default_rng(2).normal(size=(1, 1, 4, 4))
    grad_x, _, _ = pn.conv2d_backward(np.ones((1, 1, 4, 4)), single_filter(identity), grad_out)
    np.testing.assert_array_equal(grad_x, grad_out)


def test_zero_output_gradient():
    rng = np.random.default_rng(3)
    layer = pn.ConvLayer(rng.normal(size=(2, 1, 3, 3)), np.zeros(2))
    grads = pn.conv2d_backward(rng.normal(size=(1, 1, 4, 4)), layer, np.zeros((1, 2, 4, 4)))
    assert not any(g.any() for g in grads)


def test_relu():
    x = np.array([-1.0, 0.0, 2.0])
    assert pn.relu_forward(x).tolist() == [0.0, 0.0, 2.0]
    assert pn.relu_backward(x, np.ones(3)).tolist() == [0.0, 0.0, 1.0]


def test_l1_loss():
    loss, grad = pn.l1_loss(np.array([1.0, 2.0, 3.0, 4.0]), np.array([1.0, 0.0, 5.0, 4.5]))
    assert loss == pytest.approx(1.125)
    assert grad.tolist() == [0.0, 0.25, -0.25, -0.25]
    with pytest.raises(ShapeError):
        pn.l1_loss(np.zeros(2), np.zeros(3))


def test_parameter_counts():
    s1 = pn.build_network(pn.network_spec('S1'), seed=0)
    assert s1.n_parameters == 38145
    assert len(s1.layers) == 3

    v1 = pn.build_network(pn.network_spec('V1'), seed=0)
    assert len(v1.layers) == 20
    assert v1.n_relus == 19

    s4 = pn.build_network(pn.network_spec('S4'), seed=0)
    assert len(s4.branches) == 4
    assert s4.trunk[0].in_channels == 256


def test_unknown_variant():
    with pytest.raises(ConfigError):
        pn.network_spec('S9')
    with pytest.raises(ConfigError):
        pn.Network(pn.NetworkSpec('S1', 20, ('lr_pet',), 4), [])


def test_zero_head_returns_the_input():
    net = pn.build_network(pn.network_spec('S2', filters=4), seed=1)
    inputs = np.random.default_rng(4).uniform(size=(2, 2, 8, 8))
    residual, sr = pn.forward_sr(net, inputs)

    assert not residual.any()
    np.testing.assert_array_equal(sr, inputs[:, 0:1])


def test_sr_is_input_plus_residual():
    net = pn.build_network(pn.network_spec('S3', filters=4), seed=2, zero_head=False)
    inputs = np.random.default_rng(5).uniform(size=(1, 3, 6, 7))
    residual, sr = pn.forward_sr(net, inputs)

    assert residual.shape == (1, 1, 6, 7)
    assert np.array_equal(sr, inputs[:, 0:1] + residual)


@pytest.mark.parametrize("size", [1, 5])
def test_output_shape_follows_the_input(size):
    net = pn.build_network(pn.network_spec('S1', filters=2), seed=0, zero_head=False)
    residual, _ = net.forward(np.ones((3, 1, size, size)))
    assert residual.shape == (3, 1, size, size)


def test_receptive_field_of_the_deep_networks():
    net = pn.build_network(pn.network_spec('V1', filters=2), seed=3, zero_head=False)
    inputs = np.random.default_rng(6).uniform(size=(1, 1, 51, 51))
    base, _ = net.forward(inputs)
    inputs[0, 0, 25, 25] += 1.0
    moved, _ = net.forward(inputs)

    changed = np.argwhere(moved[0, 0] != base[0, 0])
    if len(changed):
        assert np.abs(changed - 25).max() <= 20


def test_translation_equivariance():
    net = pn.build_network(pn.network_spec('S2', filters=4), seed=4, zero_head=False)
    inputs = np.random.default_rng(7).uniform(size=(1, 2, 16, 16))
    residual, _ = net.forward(inputs)
    shifted, _ = net.forward(np.roll(inputs, 1, axis=3))

    np.testing.assert_allclose(shifted[..., 4:-4], np.roll(residual, 1, axis=3)[..., 4:-4], atol=1e-10)


def test_adam_with_zero_gradient():
    params = [np.ones(3)]
    state = pn.AdamState(learning_rate=0.1)
    pn.adam_step(params, [np.zeros(3)], state)
    assert params[0].tolist() == [1.0, 1.0, 1.0]
    assert state.t == 1


def test_adam_first_step_moves_by_the_learning_rate():
    params = [np.array([1.0, 1.0])]
    state = pn.AdamState(learning_rate=0.01)
    pn.adam_step(params, [np.array([2.0, -0.5])], state)
    np.testing.assert_allclose(params[0], [0.99, 1.01], rtol=1e-6)


def test_adam_two_steps():
    params = [np.array([0.0])]
    state = pn.AdamState(learning_rate=0.1)
    pn.adam_step(params, [np.array([1.0])], state)
    pn.adam_step(params, [np.array([2.0])], state)

    m = 0.9 * 0.1 * 1.0 + 0.1 * 2.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
    second = 0.1 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    first = 0.1 * 1.0 / (1.0 + 1e-8)
    assert params[0][0] == pytest.approx(-(first + second), rel=1e-10)


def test_zero_learning_rate_keeps_the_weights():
    net = pn.build_network(pn.network_spec('S1', filters=4), seed=0, zero_head=False)
    before = [p.copy() for p in net.parameters()]
    data = Patches(np.random.default_rng(8).uniform(size=(4, 1, 6, 6)), np.zeros((4, 1, 6, 6)))
    pn.train(net, data, pn.TrainConfig(epochs=2, batch_size=2, learning_rate=0.0))
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


def test_training_is_reproducible():
    rng = np.random.default_rng(9)
    data = Patches(rng.uniform(size=(6, 2, 6, 6)), rng.normal(0, 0.1, size=(6, 1, 6, 6)))
    cfg = pn.TrainConfig(epochs=3, batch_size=4, learning_rate=1e-3, seed=5)
    first, first_history = pn.train(pn.build_network(pn.network_spec('S2', filters=4), seed=1), data, cfg)
    second, second_history = pn.train(pn.build_network(pn.network_spec('S2', filters=4), seed=1), data, cfg)

    assert all(np.array_equal(a, b) for a, b in zip(first.parameters(), second.parameters()))
    assert first_history.equals(second_history)
    assert first_history['epoch'].tolist() == [0, 1, 2, 3]


def test_single_patch_is_learned():
    rng = np.random.default_rng(10)
    inputs = rng.uniform(0.2, 1.0, size=(1, 1, 8, 8))
    data = Patches(inputs, 0.5 * inputs)
    net = pn.build_network(pn.network_spec('S1', filters=8), seed=0)
    _, history = pn.train(net, data, pn.TrainConfig(epochs=300, batch_size=1, learning_rate=3e-3))

    assert history['train_loss'].iloc[-1] < 0.1 * history['train_loss'].iloc[0]


def test_training_on_nothing():
    net = pn.build_network(pn.network_spec('S1', filters=2), seed=0)
    with pytest.raises(ConfigError):
        pn.train(net, Patches(np.zeros((0, 1, 4, 4)), np.zeros((0, 1, 4, 4))))


@pytest.mark.parametrize("variant", ['S1', 'S2', 'S3', 'S4', 'V1', 'V2', 'V3', 'V4'])
def test_gradients_of_every_variant(variant):
    spec = pn.network_spec(variant, filters=3)
    net = pn.build_network(spec, seed=11, zero_head=False)
    rng = np.random.default_rng(12)
    inputs = rng.uniform(size=(1, len(spec.inputs), 6, 6))
    target = rng.normal(size=(1, 1, 6, 6))
    check = pn.gradient_check(net, inputs, target, max_per_array=None if variant[0] == 'S' else 4)

    assert check.n_checked > 0
    assert check.max_rel_error < 1e-5


def test_checkpoint_file(folder):
    net = pn.build_network(pn.network_spec('S4', filters=4), seed=13, zero_head=False)
    path = os.path.join(folder, 'S4')
    pn.save_checkpoint(net, path, seed=13, epoch=7)
    loaded, manifest = pn.load_checkpoint(f"{path}.json")

    assert loaded.spec == net.spec
    assert manifest['seed'] == 13
    assert manifest['epoch'] == 7
    assert manifest['layers'][1]['weights_offset'] == 4 * 9 * 4 + 4 * 4
    assert os.path.getsize(f"{path}.bin") == net.n_parameters * 4
    for a, b in zip(loaded.parameters(), net.parameters()):
        np.testing.assert_array_equal(a, b.astype(np.float32).astype(np.float64))
