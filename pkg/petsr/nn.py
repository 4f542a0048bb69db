"""NN

Small convolutional network engine with hand-derived gradients: 3x3 convolutions (stride 1, zero padding 1),
ReLU, L1 loss and Adam.

Tensors are numpy arrays shaped (batch, channels, height, width).

Every network predicts a residual that is added to its first input channel (the LR PET). The first layer is
a set of branches, one 3x3 convolution + ReLU per input channel; the branch outputs are concatenated and fused
by the second layer, followed by plain convolution + ReLU layers and a single-filter output layer without
activation. The branch stage counts as one layer, so S variants have 3 layers and V variants 20.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Tuple, List, Optional, Protocol, Dict
import numpy as np
import pandas as pd
from petsr import config
from petsr.common import ConfigError, ShapeError, write_bytes, write_json, read_json

logger = logging.getLogger(__name__)

KERNEL = config.kernel_size
CHECKPOINT_DTYPE = '<f4'


@dataclass(eq=False)
class ConvLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4 or self.weights.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"conv weights must be (out, in, {KERNEL}, {KERNEL}), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters")

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(f"input of shape {x.shape} does not match a layer with {layer.in_channels} input channels")
    batch, _, height, width = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((layer.out_channels, batch, height, width), dtype=np.result_type(x, layer.weights))
    for i in range(KERNEL):
        for j in range(KERNEL):
            out += np.tensordot(layer.weights[:, :, i, j], padded[:, :, i:i + height, j:j + width], axes=([1], [1]))
    return out.transpose(1, 0, 2, 3) + layer.bias[np.newaxis, :, np.newaxis, np.newaxis]


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, weights and bias of `conv2d_forward(x, layer)` given dL/d(output)"""
    batch, _, height, width = x.shape
    if grad_out.shape != (batch, layer.out_channels, height, width):
        raise ShapeError(f"output gradient of shape {grad_out.shape} does not match forward output {(batch, layer.out_channels, height, width)}")
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    grad_padded = np.zeros_like(padded, dtype=np.result_type(x, grad_out))
    grad_weights = np.zeros_like(layer.weights, dtype=np.result_type(layer.weights, grad_out))
    for i in range(KERNEL):
        for j in range(KERNEL):
            window = padded[:, :, i:i + height, j:j + width]
            grad_weights[:, :, i, j] = np.tensordot(grad_out, window, axes=([0, 2, 3], [0, 2, 3]))
            grad_padded[:, :, i:i + height, j:j + width] += np.tensordot(layer.weights[:, :, i, j], grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return grad_padded[:, :, 1:-1, 1:-1], grad_weights, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0)


def l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute difference and its (sub)gradient sign(pred - target) / n, with sign(0) = 0"""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {target.shape}")
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


class NetworkSpec(NamedTuple):
    variant: str
    depth: int
    inputs: Tuple[str, ...]
    filters: int = config.n_filters
    fusion_depth: int = 1


def network_spec(variant: str, filters: int = config.n_filters) -> NetworkSpec:
    if variant not in config.network_inputs:
        raise ConfigError(f"unknown network variant {variant}, expected one of {list(config.network_inputs)}")
    spec = NetworkSpec(variant, config.network_depths[variant[0]], config.network_inputs[variant], filters)
    validate_spec(spec)
    return spec


def validate_spec(spec: NetworkSpec):
    if spec.variant not in config.network_inputs:
        raise ConfigError(f"unknown network variant {spec.variant}")
    if spec.depth != config.network_depths[spec.variant[0]]:
        raise ConfigError(f"variant {spec.variant} has depth {config.network_depths[spec.variant[0]]}, got {spec.depth}")
    if tuple(spec.inputs) != config.network_inputs[spec.variant]:
        raise ConfigError(f"variant {spec.variant} takes inputs {config.network_inputs[spec.variant]}, got {spec.inputs}")
    if spec.filters < 1 or spec.fusion_depth != 1:
        raise ConfigError(f"invalid filters/fusion depth {spec.filters}/{spec.fusion_depth}")


class Network:
    """Branch-fusion residual CNN; `layers` holds the branches, the fusion layer, the body and the head, in that order"""

    def __init__(self, spec: NetworkSpec, layers: List[ConvLayer]):
        validate_spec(spec)
        n_inputs = len(spec.inputs)
        if len(layers) != n_inputs + spec.depth - 1:
            raise ShapeError(f"{spec.variant} needs {n_inputs + spec.depth - 1} conv layers, got {len(layers)}")
        self.spec = spec
        self.layers = layers

    @property
    def branches(self) -> List[ConvLayer]:
        return self.layers[:len(self.spec.inputs)]

    @property
    def trunk(self) -> List[ConvLayer]:
        """Fusion layer, body layers and head"""
        return self.layers[len(self.spec.inputs):]

    def parameters(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in (layer.weights, layer.bias)]

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    @property
    def n_relus(self) -> int:
        return self.spec.depth - 1

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, Dict]:
        """Residual and the cache needed by `backward` (layer inputs and pre-activations)"""
        if inputs.ndim != 4 or inputs.shape[1] != len(self.spec.inputs):
            raise ShapeError(f"{self.spec.variant} expects {len(self.spec.inputs)} input channels, got shape {inputs.shape}")
        branch_inputs = [inputs[:, k:k + 1] for k in range(len(self.spec.inputs))]
        branch_pre = [conv2d_forward(x, layer) for x, layer in zip(branch_inputs, self.branches)]
        activation = np.concatenate([relu_forward(z) for z in branch_pre], axis=1)
        trunk_inputs, trunk_pre = [], []
        trunk = self.trunk
        for index, layer in enumerate(trunk):
            trunk_inputs.append(activation)
            z = conv2d_forward(activation, layer)
            trunk_pre.append(z)
            activation = z if index == len(trunk) - 1 else relu_forward(z)
        cache = {'branch_inputs': branch_inputs, 'branch_pre': branch_pre, 'trunk_inputs': trunk_inputs, 'trunk_pre': trunk_pre}
        return activation, cache

    def backward(self, cache: Dict, grad_residual: np.ndarray) -> List[np.ndarray]:
        """Gradients of every parameter, in the order of `parameters()`"""
        trunk = self.trunk
        trunk_grads: List[Tuple[np.ndarray, np.ndarray]] = []
        grad = grad_residual
        for index in range(len(trunk) - 1, -1, -1):
            if index != len(trunk) - 1:
                grad = relu_backward(cache['trunk_pre'][index], grad)
            grad, grad_w, grad_b = conv2d_backward(cache['trunk_inputs'][index], trunk[index], grad)
            trunk_grads.append((grad_w, grad_b))
        filters = self.spec.filters
        branch_grads = []
        for k, layer in enumerate(self.branches):
            grad_k = relu_backward(cache['branch_pre'][k], grad[:, k * filters:(k + 1) * filters])
            _, grad_w, grad_b = conv2d_backward(cache['branch_inputs'][k], layer, grad_k)
            branch_grads.append((grad_w, grad_b))
        ordered = branch_grads + trunk_grads[::-1]
        return [g for pair in ordered for g in pair]

    def relu_masks(self, cache: Dict) -> List[np.ndarray]:
        pre = cache['branch_pre'] + cache['trunk_pre'][:-1]
        return [z > 0 for z in pre]


def build_network(spec: NetworkSpec, seed: int, zero_head: bool = True, dtype=np.float64) -> Network:
    """He-style initialisation (std sqrt(2 / fan_in)) with zero biases; the head starts at zero so sr = LR"""
    validate_spec(spec)
    rng = np.random.default_rng(seed)
    filters = spec.filters

    def he_layer(n_in, n_out):
        std = np.sqrt(2.0 / (n_in * KERNEL * KERNEL))
        weights = rng.normal(0.0, std, size=(n_out, n_in, KERNEL, KERNEL)).astype(dtype)
        return ConvLayer(weights, np.zeros(n_out, dtype=dtype))

    layers = [he_layer(1, filters) for _ in spec.inputs]
    layers.append(he_layer(filters * len(spec.inputs), filters))
    layers.extend(he_layer(filters, filters) for _ in range(spec.depth - 3))
    head = he_layer(filters, 1)
    if zero_head:
        head = ConvLayer(np.zeros_like(head.weights), np.zeros_like(head.bias))
    layers.append(head)
    logger.debug("built %s with %s parameters", spec.variant, sum(l.weights.size + l.bias.size for l in layers))
    return Network(spec, layers)


def forward_sr(net: Network, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    residual, _ = net.forward(inputs)
    return residual, inputs[:, 0:1] + residual


@dataclass
class AdamState:
    learning_rate: float = config.learning_rate
    beta1: float = config.adam_betas[0]
    beta2: float = config.adam_betas[1]
    epsilon: float = config.adam_epsilon
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)


def adam_step(params: List[np.ndarray], grads: List[np.ndarray], state: AdamState) -> Tuple[List[np.ndarray], AdamState]:
    """Bias-corrected Adam; parameters and moments are updated in place"""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ShapeError("parameter and gradient shapes do not match")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bias_correction1 = 1.0 - state.beta1 ** state.t
    bias_correction2 = 1.0 - state.beta2 ** state.t
    step_size = state.learning_rate / bias_correction1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= step_size * m / (np.sqrt(v / bias_correction2) + state.epsilon)
    return params, state


class PatchData(Protocol):
    inputs: np.ndarray
    targets: np.ndarray


class TrainConfig(NamedTuple):
    epochs: int = config.epochs
    batch_size: int = config.batch_size
    learning_rate: float = config.learning_rate
    seed: int = 0
    log_every: int = 10


def batch_loss(net: Network, data: PatchData, batch_size: int) -> float:
    """Sample-weighted mean L1 loss over the whole set, without updating the network"""
    total = 0.0
    n = len(data.inputs)
    for start in range(0, n, batch_size):
        residual, _ = net.forward(data.inputs[start:start + batch_size])
        loss, _ = l1_loss(residual, data.targets[start:start + batch_size])
        total += loss * len(residual)
    return total / n


def train(net: Network, dataset: PatchData, cfg: TrainConfig = TrainConfig(),
          validation: Optional[PatchData] = None) -> Tuple[Network, pd.DataFrame]:
    """
    Minibatch Adam on the L1 loss between predicted and target residuals.

    Patches are visited in a fresh permutation every epoch, drawn from a generator seeded once with `cfg.seed`,
    so a run is reproducible bit for bit.

    Returns
    -------
    the trained network (updated in place) and the history: epoch, train_loss, val_loss (NaN without validation);
    epoch 0 holds the losses before training
    """
    n = len(dataset.inputs)
    if n == 0:
        raise ConfigError("cannot train on an empty patch set")
    if len(dataset.targets) != n:
        raise ShapeError(f"{n} input patches but {len(dataset.targets)} targets")
    if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.learning_rate < 0:
        raise ConfigError(f"invalid training configuration {cfg}")
    rng = np.random.default_rng(cfg.seed)
    state = AdamState(learning_rate=cfg.learning_rate)
    params = net.parameters()

    def record(epoch, train_loss):
        val_loss = batch_loss(net, validation, cfg.batch_size) if validation is not None and len(validation.inputs) else np.nan
        history.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss})
        level = logging.INFO if epoch % cfg.log_every == 0 or epoch == cfg.epochs else logging.DEBUG
        logger.log(level, "%s epoch %s: train loss %.6f, val loss %.6f", net.spec.variant, epoch, train_loss, val_loss)

    history: List[Dict] = []
    record(0, batch_loss(net, dataset, cfg.batch_size))
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            residual, cache = net.forward(dataset.inputs[batch])
            loss, grad = l1_loss(residual, dataset.targets[batch])
            adam_step(params, net.backward(cache, grad), state)
            total += loss * len(batch)
        record(epoch, total / n)
    return net, pd.DataFrame(history, columns=['epoch', 'train_loss', 'val_loss'])


def write_history(history: pd.DataFrame, path: str):
    logger.info('writing file %s', path)
    history.to_csv(path, index=False)


class GradientCheck(NamedTuple):
    max_rel_error: float
    n_checked: int
    n_skipped: int


def gradient_check(net: Network, inputs: np.ndarray, target: np.ndarray, step: float = 1e-4,
                   max_per_array: Optional[int] = None, seed: int = 0) -> GradientCheck:
    """
    Compare the analytic L1 loss gradient with central finite differences, one parameter element at a time.

    Elements whose perturbation changes a ReLU mask or the sign of a residual error sit on a kink and are
    skipped. Away from kinks the loss is affine in any single parameter, so the difference quotient is exact up to
    rounding; relative errors are taken against max(|numeric|, |analytic|, 1e-4). With `max_per_array` only a
    seeded random subset of every parameter array is checked.
    """
    residual, cache = net.forward(inputs)
    _, grad_residual = l1_loss(residual, target)
    analytic = net.backward(cache, grad_residual)
    masks = net.relu_masks(cache)
    signs = np.sign(residual - target)
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0

    def evaluate():
        out, c = net.forward(inputs)
        same = all(np.array_equal(a, b) for a, b in zip(net.relu_masks(c), masks)) and np.array_equal(np.sign(out - target), signs)
        return l1_loss(out, target)[0], same

    for param, grad in zip(net.parameters(), analytic):
        flat = param.reshape(-1)
        indices = np.arange(flat.size)
        if max_per_array is not None and flat.size > max_per_array:
            indices = np.sort(rng.choice(flat.size, size=max_per_array, replace=False))
        for index in indices:
            original = flat[index]
            flat[index] = original + step
            plus, same_plus = evaluate()
            flat[index] = original - step
            minus, same_minus = evaluate()
            flat[index] = original
            if not (same_plus and same_minus):
                skipped += 1
                continue
            numeric = (plus - minus) / (2 * step)
            exact = grad.reshape(-1)[index]
            scale = max(abs(numeric), abs(exact), 1e-4)
            worst = max(worst, abs(numeric - exact) / scale)
            checked += 1
    return GradientCheck(worst, checked, skipped)


def _base_name(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext in ('.json', '.bin') else path


def save_checkpoint(net: Network, path: str, seed: int, epoch: int):
    """JSON manifest plus one little-endian float32 blob of all parameters in layer order"""
    base = _base_name(path)
    offset = 0
    layers = []
    for layer in net.layers:
        entry = {'weights_shape': list(layer.weights.shape), 'weights_offset': offset}
        offset += layer.weights.size * 4
        entry.update({'bias_shape': list(layer.bias.shape), 'bias_offset': offset})
        offset += layer.bias.size * 4
        layers.append(entry)
    blob = b''.join(np.ascontiguousarray(p, dtype=CHECKPOINT_DTYPE).tobytes() for p in net.parameters())
    write_bytes(f"{base}.bin", blob)
    write_json(f"{base}.json", {'spec': net.spec._asdict(), 'layers': layers, 'seed': seed, 'epoch': epoch,
                                'dtype': CHECKPOINT_DTYPE, 'blob': os.path.basename(f"{base}.bin")})


def load_checkpoint(path: str, dtype=np.float64) -> Tuple[Network, Dict]:
    base = _base_name(path)
    manifest = read_json(f"{base}.json")
    raw = manifest['spec']
    spec = NetworkSpec(raw['variant'], int(raw['depth']), tuple(raw['inputs']), int(raw['filters']), int(raw.get('fusion_depth', 1)))
    blob = np.fromfile(os.path.join(os.path.dirname(base) or '.', manifest['blob']), dtype=CHECKPOINT_DTYPE)
    layers = []
    for entry in manifest['layers']:
        def take(shape, offset):
            start = offset // 4
            count = int(np.prod(shape))
            if start + count > blob.size:
                raise ShapeError(f"checkpoint blob too short for a parameter of shape {shape}")
            return blob[start:start + count].reshape(shape).astype(dtype)
        layers.append(ConvLayer(take(entry['weights_shape'], entry['weights_offset']), take(entry['bias_shape'], entry['bias_offset'])))
    return Network(spec, layers), manifest
