"""
Dense tensor kernels, reverse-mode gradients, Adam and a miniature U-Net

Tensors are numpy arrays in NCHW layout. Training runs in float32; every
kernel preserves the dtype of its inputs so the same code runs in float64
for gradient checking.
"""

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .exceptions import (
    ConfigurationError, ErrorCode, TrainingError,
    create_non_finite_error, create_shape_mismatch_error
)
from .interfaces import SegmentationPredictor

logger = logging.getLogger(__name__)

Tensor = np.ndarray

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class UNetConfig:
    """Architecture of one segmentation network"""
    input_size: int = 64
    levels: int = 3
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> bool:
        """Validate configuration values"""
        if self.levels < 1:
            raise ConfigurationError("levels must be >= 1", config_key="levels")
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1", config_key="base_channels")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigurationError("channel counts must be >= 1", config_key="in_channels")
        if self.input_size <= 0 or self.input_size % (2 ** self.levels) != 0:
            raise ConfigurationError(
                f"input_size {self.input_size} must be divisible by 2^levels = {2 ** self.levels}",
                config_key="input_size",
                suggestions=["Use a power-of-two input size such as 64"]
            )
        return True

    def channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Name -> shape for every trainable tensor, in canonical order"""
        shapes: Dict[str, Tuple[int, ...]] = {}

        def conv(prefix: str, c_in: int, c_out: int, k: int = 3) -> None:
            shapes[f"{prefix}.weight"] = (c_out, c_in, k, k)
            shapes[f"{prefix}.bias"] = (c_out,)

        for level in range(self.levels + 1):
            c_in = self.in_channels if level == 0 else self.channels(level - 1)
            conv(f"enc{level}.conv1", c_in, self.channels(level))
            conv(f"enc{level}.conv2", self.channels(level), self.channels(level))
        for level in range(self.levels):
            conv(f"dec{level}.up", self.channels(level + 1), self.channels(level))
            conv(f"dec{level}.conv1", 2 * self.channels(level), self.channels(level))
            conv(f"dec{level}.conv2", self.channels(level), self.channels(level))
        conv("head", self.channels(0), self.out_channels, k=1)
        return {name: shapes[name] for name in sorted(shapes)}


class ModelWeights(Mapping):
    """Immutable name -> tensor mapping in lexicographic name order"""

    def __init__(self, entries: Mapping):
        frozen = {}
        for name in sorted(entries):
            array = np.array(entries[name], copy=True)
            array.flags.writeable = False
            frozen[name] = array
        self._entries: Dict[str, np.ndarray] = frozen

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"ModelWeights({len(self)} tensors, {self.parameter_count} parameters)"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        return self.bit_equal(other)

    __hash__ = None  # type: ignore[assignment]

    @property
    def parameter_count(self) -> int:
        return int(sum(array.size for array in self._entries.values()))

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(array.shape) for name, array in self._entries.items()}

    def astype(self, dtype: np.dtype) -> "ModelWeights":
        return ModelWeights({name: array.astype(dtype) for name, array in self._entries.items()})

    def bit_equal(self, other: "ModelWeights") -> bool:
        """Same names, dtypes, shapes and bytes"""
        if list(self) != list(other):
            return False
        for name in self:
            a, b = self[name], other[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def check_finite(self, stage: str = "weight") -> None:
        for name, array in self._entries.items():
            if not np.all(np.isfinite(array)):
                raise create_non_finite_error(name, stage)

    def check_matches(self, config: UNetConfig) -> None:
        expected = config.parameter_shapes()
        actual = self.shapes()
        if list(expected) != list(actual):
            raise create_shape_mismatch_error("parameter names", list(expected), list(actual))
        for name, shape in expected.items():
            if actual[name] != shape:
                raise create_shape_mismatch_error(f"shape of '{name}'", shape, actual[name])


def init_weights(config: UNetConfig, rng: np.random.Generator,
                 dtype: np.dtype = np.float32) -> ModelWeights:
    """
    Kaiming-uniform kernels and zero biases

    Tensors are drawn in canonical (lexicographic) order from one stream.

    Args:
        config: Network architecture
        rng: Seeded generator (see utils.make_rng)
        dtype: float32 for training, float64 for gradient checks

    Returns:
        Freshly initialised weights
    """
    entries = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias"):
            entries[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            entries[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelWeights(entries)


# ---------------------------------------------------------------------------
# Forward / backward kernels on raw arrays
# ---------------------------------------------------------------------------

def _check_conv_shapes(x: Tensor, kernel: Tensor, bias: Tensor) -> None:
    if x.ndim != 4:
        raise create_shape_mismatch_error("conv input rank", 4, x.ndim)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise create_shape_mismatch_error("conv kernel shape", "(O, C, k, k) with odd k", kernel.shape)
    if kernel.shape[1] != x.shape[1]:
        raise create_shape_mismatch_error("conv input channels", kernel.shape[1], x.shape[1])
    if bias.shape != (kernel.shape[0],):
        raise create_shape_mismatch_error("conv bias shape", (kernel.shape[0],), bias.shape)


def _im2col(x: Tensor, k: int) -> Tensor:
    n, c, h, w = x.shape
    pad = k // 2
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def _conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    n, _, h, w = x.shape
    out_channels, _, k, _ = kernel.shape
    cols = _im2col(x, k)
    out = cols @ kernel.reshape(out_channels, -1).T + bias
    out = out.reshape(n, h, w, out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv2d_backward(grad: Tensor, x_shape: Tuple[int, ...], kernel: Tensor,
                     cols: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    n, c, h, w = x_shape
    out_channels, _, k, _ = kernel.shape
    pad = k // 2
    grad_flat = grad.transpose(0, 2, 3, 1).reshape(n * h * w, out_channels)
    d_kernel = (grad_flat.T @ cols).reshape(kernel.shape)
    d_bias = grad_flat.sum(axis=0)
    d_cols = (grad_flat @ kernel.reshape(out_channels, -1)).reshape(n, h, w, c, k, k)
    d_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
    # fixed accumulation order keeps the result bit-reproducible
    for i in range(k):
        for j in range(k):
            d_padded[:, :, i:i + h, j:j + w] += d_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    d_x = d_padded[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(d_x), d_kernel, d_bias


def conv2d_forward(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """
    Same-size 2-D cross-correlation (zero padding k // 2)

    Args:
        x: Input batch, N x C x H x W
        kernel: O x C x k x k with odd k
        bias: O

    Returns:
        N x O x H x W output
    """
    _check_conv_shapes(x, kernel, bias)
    out, _ = _conv2d(x, kernel, bias)
    return out


def _max_pool2(x: Tensor) -> Tuple[Tensor, Tensor]:
    n, c, h, w = x.shape
    windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    index = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
    return out, index


def _max_pool2_backward(grad: Tensor, index: Tensor) -> Tensor:
    n, c, h2, w2 = grad.shape
    d_windows = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
    np.put_along_axis(d_windows, index[..., None], grad[..., None], axis=-1)
    return d_windows.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)


# ---------------------------------------------------------------------------
# Reverse-mode graph
# ---------------------------------------------------------------------------

class Node:
    """A value in the computation graph"""

    __slots__ = ("value", "parents", "backward_fn", "name")

    def __init__(self, value: Tensor, parents: Sequence["Node"] = (),
                 backward_fn: Optional[Callable[[Tensor], Sequence[Optional[Tensor]]]] = None,
                 name: Optional[str] = None):
        self.value = value
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name


def conv2d(x: Node, kernel: Node, bias: Node) -> Node:
    _check_conv_shapes(x.value, kernel.value, bias.value)
    out, cols = _conv2d(x.value, kernel.value, bias.value)
    x_shape = x.value.shape

    def backward_fn(grad: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        return _conv2d_backward(grad, x_shape, kernel.value, cols)

    return Node(out, (x, kernel, bias), backward_fn)


def relu(x: Node) -> Node:
    active = x.value > 0
    out = np.where(active, x.value, 0).astype(x.value.dtype)
    return Node(out, (x,), lambda grad: (grad * active,))


def max_pool2(x: Node) -> Node:
    out, index = _max_pool2(x.value)
    return Node(out, (x,), lambda grad: (_max_pool2_backward(grad, index),))


def upsample2(x: Node) -> Node:
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)

    def backward_fn(grad: Tensor) -> Tuple[Tensor]:
        n, c, h, w = grad.shape
        return (grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return Node(out, (x,), backward_fn)


def concat_channels(a: Node, b: Node) -> Node:
    split = a.value.shape[1]
    out = np.concatenate([a.value, b.value], axis=1)
    return Node(out, (a, b), lambda grad: (grad[:, :split], grad[:, split:]))


def sigmoid(x: Node) -> Node:
    out = expit(x.value)
    return Node(out, (x,), lambda grad: (grad * out * (1 - out),))


def _check_loss_shapes(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise create_shape_mismatch_error("loss prediction/target", pred.shape, target.shape)


def bce_value(pred: Tensor, target: Tensor) -> Tensor:
    """Mean per-pixel binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]"""
    _check_loss_shapes(pred, target)
    p = np.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    t = target.astype(pred.dtype)
    return -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))


def bce_loss(pred: Node, target: Tensor) -> Node:
    """Graph node for bce_value"""
    value = bce_value(pred.value, target)
    p = pred.value
    t = target.astype(p.dtype)
    inside = (p >= BCE_CLAMP) & (p <= 1 - BCE_CLAMP)
    clamped = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)

    def backward_fn(grad: Tensor) -> Tuple[Tensor]:
        local = (-t / clamped + (1 - t) / (1 - clamped)) / p.size
        return (grad * local * inside,)

    return Node(np.asarray(value, dtype=p.dtype), (pred,), backward_fn)


def _topological_order(root: Node) -> List[Node]:
    order: List[Node] = []
    visited = set()
    stack: List[Tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in reversed(node.parents):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Node) -> Dict[str, Tensor]:
    """
    Reverse-mode gradients of a scalar loss

    Args:
        loss: Scalar node produced by bce_loss

    Returns:
        Gradient for every named (parameter) node reachable from the loss

    Raises:
        TrainingError: If any parameter gradient is NaN or infinite
    """
    order = _topological_order(loss)
    pending: Dict[int, Tensor] = {id(loss): np.ones_like(loss.value)}
    gradients: Dict[str, Tensor] = {}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if node.name is not None:
            gradients[node.name] = grad if grad is not None else np.zeros_like(node.value)
        if grad is None or node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(grad)):
            if parent_grad is None:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad
    for name in sorted(gradients):
        if not np.all(np.isfinite(gradients[name])):
            raise create_non_finite_error(name, "gradient")
    return {name: gradients[name] for name in sorted(gradients)}


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

def _check_batch(config: UNetConfig, batch: Tensor) -> None:
    expected = (config.in_channels, config.input_size, config.input_size)
    if batch.ndim != 4 or tuple(batch.shape[1:]) != expected:
        raise create_shape_mismatch_error("batch shape (C, H, W)", expected, tuple(batch.shape[1:]))


def _double_conv(h: Node, params: Dict[str, Node], prefix: str) -> Node:
    h = relu(conv2d(h, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"]))
    return relu(conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"]))


def unet_graph(config: UNetConfig, weights: ModelWeights, batch: Tensor) -> Node:
    """Build the forward graph; parameter nodes are named after their weights"""
    weights.check_matches(config)
    _check_batch(config, batch)
    params = {name: Node(value, name=name) for name, value in weights.items()}
    h = Node(np.asarray(batch, dtype=next(iter(weights.values())).dtype))
    skips: List[Node] = []
    for level in range(config.levels + 1):
        if level > 0:
            h = max_pool2(h)
        h = _double_conv(h, params, f"enc{level}")
        if level < config.levels:
            skips.append(h)
    for level in reversed(range(config.levels)):
        h = upsample2(h)
        h = conv2d(h, params[f"dec{level}.up.weight"], params[f"dec{level}.up.bias"])
        h = concat_channels(skips[level], h)
        h = _double_conv(h, params, f"dec{level}")
    logits = conv2d(h, params["head.weight"], params["head.bias"])
    return sigmoid(logits)


def unet_forward(config: UNetConfig, weights: ModelWeights, batch: Tensor) -> Tensor:
    """
    Per-pixel probabilities for an NCHW batch

    No normalisation layers exist, so samples never interact. A saturated
    sigmoid is clipped to [BCE_CLAMP, 1 - BCE_CLAMP], keeping every
    probability strictly inside (0, 1).
    """
    out = unet_graph(config, weights, batch).value
    if not np.all(np.isfinite(out)):
        raise TrainingError("Non-finite network output", suggestions=["Check input normalisation"])
    return np.clip(out, BCE_CLAMP, 1 - BCE_CLAMP)


@dataclass(frozen=True)
class UNet(SegmentationPredictor):
    """A configured network with its weights"""
    config: UNetConfig
    weights: ModelWeights

    @classmethod
    def initialise(cls, config: UNetConfig, rng: np.random.Generator,
                   dtype: np.dtype = np.float32) -> "UNet":
        return cls(config, init_weights(config, rng, dtype))

    @property
    def input_size(self) -> int:
        return self.config.input_size

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        return unet_forward(self.config, self.weights, batch)

    def with_weights(self, weights: ModelWeights) -> "UNet":
        weights.check_matches(self.config)
        return UNet(self.config, weights)


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam moments with coupled (L2) weight decay"""
    step_count: int = 0
    first_moments: Dict[str, Tensor] = field(default_factory=dict)
    second_moments: Dict[str, Tensor] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4

    @classmethod
    def for_weights(cls, weights: ModelWeights, learning_rate: float = 1e-4,
                    weight_decay: float = 1e-4) -> "AdamState":
        return cls(
            first_moments={name: np.zeros_like(array) for name, array in weights.items()},
            second_moments={name: np.zeros_like(array) for name, array in weights.items()},
            learning_rate=learning_rate,
            weight_decay=weight_decay,
        )


def adam_step(state: AdamState, weights: ModelWeights,
              grads: Dict[str, Tensor]) -> Tuple[ModelWeights, AdamState]:
    """
    One Adam update with bias correction

    Weight decay is added to the gradient (g <- g + wd * w) before the
    moment updates.

    Returns:
        New weights and new state; the inputs are left untouched
    """
    if set(grads) != set(weights):
        raise create_shape_mismatch_error("gradient names", sorted(weights), sorted(grads))
    step = state.step_count + 1
    correction1 = 1 - state.beta1 ** step
    correction2 = 1 - state.beta2 ** step
    new_weights, new_first, new_second = {}, {}, {}
    for name, w in weights.items():
        g = grads[name]
        m = state.first_moments.get(name)
        v = state.second_moments.get(name)
        if m is None or v is None:
            m, v = np.zeros_like(w), np.zeros_like(w)
        if g.shape != w.shape or m.shape != w.shape or v.shape != w.shape:
            raise create_shape_mismatch_error(f"Adam shapes for '{name}'", w.shape, (g.shape, m.shape, v.shape))
        if state.weight_decay:
            g = g + state.weight_decay * w
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        new_weights[name] = (w - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype)
        new_first[name] = m
        new_second[name] = v
    new_state = replace(state, step_count=step, first_moments=new_first, second_moments=new_second)
    return ModelWeights(new_weights), new_state


@dataclass
class SegmentationDataset:
    """Network-ready inputs and binary targets, both N x 1 x H x W"""
    inputs: np.ndarray
    targets: np.ndarray
    subject_ids: List[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.inputs.shape != self.targets.shape:
            raise create_shape_mismatch_error("dataset inputs/targets", self.inputs.shape, self.targets.shape)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def subset(self, indices: Sequence[int]) -> "SegmentationDataset":
        index = np.asarray(indices, dtype=np.int64)
        subjects = [self.subject_ids[i] for i in index] if self.subject_ids else []
        return SegmentationDataset(self.inputs[index], self.targets[index], subjects)


def _augment(inputs: Tensor, targets: Tensor, flips: np.ndarray) -> Tuple[Tensor, Tensor]:
    inputs = inputs.copy()
    targets = targets.copy()
    for j, (horizontal, vertical) in enumerate(flips):
        if horizontal:
            inputs[j] = inputs[j][..., ::-1].copy()
            targets[j] = targets[j][..., ::-1].copy()
        if vertical:
            inputs[j] = inputs[j][..., ::-1, :].copy()
            targets[j] = targets[j][..., ::-1, :].copy()
    return inputs, targets


def train_epoch(model: UNet, data: SegmentationDataset, state: AdamState,
                rng: np.random.Generator, batch_size: int = 16,
                augment: bool = True) -> Tuple[UNet, AdamState, float]:
    """
    One shuffled pass over a partition

    The epoch draws one permutation, then one (horizontal, vertical) flip
    pair per sample, from ``rng``; the last short batch is kept.

    Returns:
        Updated model, updated optimiser state, sample-weighted mean loss

    Raises:
        TrainingError: Empty partition or non-finite gradients
    """
    n = len(data)
    if n == 0:
        raise TrainingError("Cannot train on an empty partition", ErrorCode.EMPTY_PARTITION)
    order = rng.permutation(n)
    flips = rng.random((n, 2)) < 0.5
    weights = model.weights
    total = 0.0
    for start in range(0, n, batch_size):
        index = order[start:start + batch_size]
        inputs = data.inputs[index]
        targets = data.targets[index]
        if augment:
            inputs, targets = _augment(inputs, targets, flips[start:start + batch_size])
        loss = bce_loss(unet_graph(model.config, weights, inputs), targets)
        grads = backward(loss)
        weights, state = adam_step(state, weights, grads)
        total += float(loss.value) * len(index)
    weights.check_finite()
    return model.with_weights(weights), state, total / n


def evaluate_loss(model: UNet, data: SegmentationDataset, batch_size: int = 16) -> float:
    """Sample-weighted mean BCE over a partition, without augmentation"""
    if len(data) == 0:
        raise TrainingError("Cannot evaluate an empty partition", ErrorCode.EMPTY_PARTITION)
    total = 0.0
    for start in range(0, len(data), batch_size):
        inputs = data.inputs[start:start + batch_size]
        targets = data.targets[start:start + batch_size]
        pred = model.predict_proba(inputs)
        total += float(bce_value(pred, targets.astype(pred.dtype))) * len(inputs)
    return total / len(data)
