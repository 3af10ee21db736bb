"""
Deterministic layer stack with explicit forward and backward passes.

Tensors are plain numpy arrays (float32, C-contiguous, row-major). Every layer
function returns ``(out, cache)`` from its forward pass and consumes that cache
in its backward pass; there is no autograd graph. All functions are dtype
generic, so the same code runs on a float64 shadow copy for gradient checks.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ConfigurationError, LoadError, ReportError, UsageError

logger = logging.getLogger(__name__)

FLOAT = np.float32
NORM_EPS = 1e-12
CHECKPOINT_MAGIC = b"CLRCKPT1"


# ---------------------------------------------------------------------------
# Layer functions
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B * H' * W', C * kh * kw), one contiguous row per receptive field"""
    batch, channels = xp.shape[:2]
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kh * kw)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                   stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, tuple]:
    """
    Cross-correlate a batch with a filter bank.

    Args:
        x: input of shape (B, C, H, W)
        w: filters of shape (C', C, kh, kw)
        b: biases of shape (C',)
        stride: step between receptive fields (>= 1)
        pad: zero padding on every side (>= 0)

    Returns:
        out of shape (B, C', H', W') and the cache for conv2d_backward
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigurationError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    batch, channels, height, width = x.shape
    filters, w_channels, kh, kw = w.shape
    if w_channels != channels:
        raise ConfigurationError(f"conv2d input has {channels} channels but weight expects {w_channels}")
    if b.shape != (filters,):
        raise ConfigurationError(f"conv2d bias shape {b.shape} does not match {filters} filters")
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise ConfigurationError(f"conv2d output would be empty for input {x.shape} and kernel {kh}x{kw}")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    out = cols @ w.reshape(filters, -1).T + b
    out = np.ascontiguousarray(out.reshape(batch, out_h, out_w, filters).transpose(0, 3, 1, 2))
    return out.astype(x.dtype, copy=False), (x.shape, xp.shape, cols, w, stride, pad)


def conv2d_backward(dout: np.ndarray, cache: tuple,
                    input_grad: bool = True) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db); dx is None when input_grad is False"""
    x_shape, xp_shape, cols, w, stride, pad = cache
    _, _, height, width = x_shape
    filters, channels, kh, kw = w.shape
    batch, _, out_h, out_w = dout.shape

    dout_rows = dout.transpose(0, 2, 3, 1).reshape(-1, filters)
    db = dout_rows.sum(axis=0)
    dw = (dout_rows.T @ cols).reshape(w.shape)
    if not input_grad:
        return None, dw.astype(dout.dtype, copy=False), db.astype(dout.dtype, copy=False)

    if stride == 1:
        # full correlation of dout with the flipped, transposed filters
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        padded = np.pad(dout, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        dcols = _im2col(padded, kh, kw, 1, xp_shape[2], xp_shape[3])
        dxp = (dcols @ flipped.reshape(channels, -1).T).reshape(batch, xp_shape[2], xp_shape[3], channels)
        dxp = dxp.transpose(0, 3, 1, 2)
    else:
        dcols = (dout_rows @ w.reshape(filters, -1)).reshape(batch, out_h, out_w, channels, kh, kw)
        dxp = np.zeros(xp_shape, dtype=dout.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * (out_h - 1) + 1:stride, j:j + stride * (out_w - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + height, pad:pad + width]
    return (np.ascontiguousarray(dx, dtype=dout.dtype), dw.astype(dout.dtype, copy=False),
            db.astype(dout.dtype, copy=False))


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return np.maximum(x, 0).astype(x.dtype, copy=False), x


def relu_backward(dout: np.ndarray, cache: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return dout * (cache > 0)


def max_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """2x2 max pooling with stride 2; trailing odd rows/columns are dropped."""
    batch, channels, height, width = x.shape
    out_h, out_w = height // 2, width // 2
    if out_h == 0 or out_w == 0:
        raise ConfigurationError(f"max pool needs spatial size >= 2, got {height}x{width}")
    cropped = x[:, :, :2 * out_h, :2 * out_w]
    windows = cropped.reshape(batch, channels, out_h, 2, out_w, 2).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(batch, channels, out_h, out_w, 4)
    # argmax returns the first maximum in row-major window order
    winners = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winners[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, winners)


def max_pool_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    x_shape, winners = cache
    batch, channels, out_h, out_w = winners.shape
    dwindows = np.zeros((batch, channels, out_h, out_w, 4), dtype=dout.dtype)
    np.put_along_axis(dwindows, winners[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :2 * out_h, :2 * out_w] = dwindows.reshape(batch, channels, out_h, out_w, 2, 2) \
        .transpose(0, 1, 2, 4, 3, 5).reshape(batch, channels, 2 * out_h, 2 * out_w)
    return dx


def global_avg_pool_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    return x.mean(axis=(2, 3)).astype(x.dtype, copy=False), x.shape


def global_avg_pool_backward(dout: np.ndarray, cache: tuple) -> np.ndarray:
    batch, channels, height, width = cache
    dx = np.broadcast_to(dout[:, :, None, None] / (height * width), cache)
    return np.ascontiguousarray(dx, dtype=dout.dtype)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """y = x W^T + b with W of shape (K, d); inputs are flattened to (B, d)."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[1]:
        raise ConfigurationError(f"linear layer expects {w.shape[1]} inputs, got {flat.shape[1]}")
    out = flat @ w.T + b
    return out.astype(x.dtype, copy=False), (x.shape, flat, w)


def linear_backward(dout: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, flat, w = cache
    dw = dout.T @ flat
    db = dout.sum(axis=0)
    dx = (dout @ w).reshape(x_shape)
    return dx, dw, db


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy of a batch of logits against integer labels.

    Returns:
        (mean_loss, dlogits) with dlogits = (softmax - one_hot) / B
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise UsageError(f"logits {logits.shape} and labels {labels.shape} are not B x K and B")
    batch, classes = logits.shape
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise UsageError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -float(log_probs[rows, labels].mean()) + 0.0
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1
    dlogits /= batch
    return loss, dlogits.astype(logits.dtype, copy=False)


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> np.ndarray:
    """Normalize a vector (or each row of a matrix); vectors with norm <= eps pass through."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(norms > eps, norms, 1)
    return (v / safe).astype(v.dtype, copy=False)


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

class ParamSet:
    """Named parameters, each with a same-shaped gradient and momentum buffer"""

    def __init__(self, params: Optional[Dict[str, np.ndarray]] = None, dtype=FLOAT):
        self.dtype = dtype
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.velocity: Dict[str, np.ndarray] = {}
        self.steps = 0
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ConfigurationError(f"parameter '{name}' already exists")
        array = np.array(value, dtype=self.dtype, copy=True, order="C")
        self.params[name] = array
        self.grads[name] = np.zeros_like(array)
        self.velocity[name] = np.zeros_like(array)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise ConfigurationError(
                f"gradient for '{name}' has shape {grad.shape}, parameter has {self.params[name].shape}")
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0)

    def copy(self, dtype=None) -> "ParamSet":
        """Deep copy; passing a dtype produces e.g. the float64 shadow used by gradient checks."""
        clone = ParamSet(self.params, dtype=dtype or self.dtype)
        for name, buffer in self.velocity.items():
            clone.velocity[name][...] = buffer
        clone.steps = self.steps
        return clone

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, value in self.params.items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return digest.hexdigest()

    def num_values(self) -> int:
        return int(sum(value.size for value in self.params.values()))


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             dampening: float = 0.0) -> None:
    """
    v <- momentum*v + (1 - dampening)*(grad + weight_decay*param); param <- param - lr*v;
    then zero the gradients.

    The first step of a ParamSet is never dampened, so v starts at the full
    gradient. With dampening = momentum the steady-state step on a constant
    gradient is lr*grad instead of lr*grad / (1 - momentum).
    """
    scale = 1.0 - dampening if params.steps else 1.0
    for name, value in params.params.items():
        grad = params.grads[name]
        if weight_decay:
            grad = grad + weight_decay * value
        velocity = params.velocity[name]
        velocity *= momentum
        velocity += scale * grad
        value -= lr * velocity
    params.steps += 1
    params.zero_grad()


# ---------------------------------------------------------------------------
# Layers and sequential stacks
# ---------------------------------------------------------------------------

@dataclass
class LayerCache:
    layer: str
    state: Any


class Layer:
    """A named layer; parameter names are prefixed with the layer name"""
    param_names: Tuple[str, ...] = ()

    def __init__(self, name: str):
        self.name = name

    def key(self, param: str) -> str:
        return f"{self.name}.{param}"

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, params: ParamSet) -> Tuple[np.ndarray, LayerCache]:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, state: Any,
                 input_grad: bool = True) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]:
        raise NotImplementedError


class Conv2d(Layer):
    param_names = ("weight", "bias")

    def __init__(self, name: str, in_channels: int, out_channels: int, kernel: int = 3,
                 stride: int = 1, pad: Optional[int] = None):
        super().__init__(name)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2 if pad is None else pad

    def init_params(self, rng):
        fan_in = self.in_channels * self.kernel * self.kernel
        weight = rng.standard_normal((self.out_channels, self.in_channels, self.kernel, self.kernel))
        return {self.key("weight"): weight * np.sqrt(2.0 / fan_in),
                self.key("bias"): np.zeros(self.out_channels)}

    def forward(self, x, params):
        out, state = conv2d_forward(x, params[self.key("weight")], params[self.key("bias")],
                                    stride=self.stride, pad=self.pad)
        return out, LayerCache(self.name, state)

    def backward(self, dout, state, input_grad=True):
        dx, dw, db = conv2d_backward(dout, state, input_grad=input_grad)
        return dx, {self.key("weight"): dw, self.key("bias"): db}


class ReLU(Layer):
    def forward(self, x, params):
        out, state = relu_forward(x)
        return out, LayerCache(self.name, state)

    def backward(self, dout, state, input_grad=True):
        return relu_backward(dout, state), {}


class MaxPool2d(Layer):
    def forward(self, x, params):
        out, state = max_pool_forward(x)
        return out, LayerCache(self.name, state)

    def backward(self, dout, state, input_grad=True):
        return max_pool_backward(dout, state), {}


class GlobalAvgPool(Layer):
    def forward(self, x, params):
        out, state = global_avg_pool_forward(x)
        return out, LayerCache(self.name, state)

    def backward(self, dout, state, input_grad=True):
        return global_avg_pool_backward(dout, state), {}


class Linear(Layer):
    param_names = ("weight", "bias")

    def __init__(self, name: str, in_features: int, out_features: int):
        super().__init__(name)
        self.in_features = in_features
        self.out_features = out_features

    def init_params(self, rng):
        bound = 1.0 / np.sqrt(self.in_features)
        return {self.key("weight"): rng.uniform(-bound, bound, (self.out_features, self.in_features)),
                self.key("bias"): np.zeros(self.out_features)}

    def forward(self, x, params):
        out, state = linear_forward(x, params[self.key("weight")], params[self.key("bias")])
        return out, LayerCache(self.name, state)

    def backward(self, dout, state, input_grad=True):
        dx, dw, db = linear_backward(dout, state)
        return dx, {self.key("weight"): dw, self.key("bias"): db}


def layer_backward(layer: Layer, cache: Optional[LayerCache], upstream_grad: np.ndarray,
                   input_grad: bool = True) -> Tuple[Optional[np.ndarray], Dict[str, np.ndarray]]:
    """Differentiate one layer given the cache of its forward call"""
    if cache is None:
        raise UsageError(f"no forward cache available for layer '{layer.name}'")
    if cache.layer != layer.name:
        raise UsageError(f"cache from layer '{cache.layer}' passed to layer '{layer.name}'")
    return layer.backward(upstream_grad, cache.state, input_grad)


class Sequential:
    """A fixed stack of layers sharing one ParamSet"""

    def __init__(self, layers: Sequence[Layer]):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"layer names must be unique, got {names}")
        self.layers: List[Layer] = list(layers)

    def init_params(self, rng: np.random.Generator, dtype=FLOAT) -> ParamSet:
        params = ParamSet(dtype=dtype)
        for layer in self.layers:
            for name, value in layer.init_params(rng).items():
                params.add(name, value)
        return params

    def forward(self, x: np.ndarray, params: ParamSet,
                keep_cache: bool = True) -> Tuple[np.ndarray, List[LayerCache]]:
        caches = []
        out = x
        for layer in self.layers:
            out, cache = layer.forward(out, params)
            if keep_cache:
                caches.append(cache)
        return out, caches

    def backward(self, dout: np.ndarray, caches: List[LayerCache], params: ParamSet,
                 input_grad: bool = True) -> Optional[np.ndarray]:
        """
        Backpropagate dout, accumulating parameter gradients into params.grads.

        Returns the gradient with respect to the input, or None when input_grad
        is False (the first layer then skips computing it).
        """
        if len(caches) != len(self.layers):
            raise UsageError(f"expected {len(self.layers)} layer caches, got {len(caches)}")
        grad = dout
        for depth, (layer, cache) in enumerate(zip(reversed(self.layers), reversed(caches))):
            first = depth == len(self.layers) - 1
            grad, param_grads = layer_backward(layer, cache, grad, input_grad=input_grad or not first)
            for name, value in param_grads.items():
                params.accumulate(name, value)
        return grad if input_grad else None


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ParamSet, path) -> None:
    """Write CLRCKPT1: magic, then per parameter name length, name, rank, dims, float32 LE payload"""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            for name, value in params.params.items():
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<I", value.ndim))
                f.write(struct.pack(f"<{value.ndim}I", *value.shape))
                f.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    except OSError as e:
        raise ReportError(f"could not write checkpoint '{path}': {e}") from e
    logger.debug("wrote %d parameters to %s", len(params), path)


def load_checkpoint(path) -> ParamSet:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise LoadError(f"could not read checkpoint '{path}': {e}") from e
    if not payload.startswith(CHECKPOINT_MAGIC):
        raise LoadError(f"'{path}' is not a CLRCKPT1 checkpoint")

    params = ParamSet()
    offset = len(CHECKPOINT_MAGIC)
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            value = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(dims)
            offset += 4 * count
            params.add(name, value)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        raise LoadError(f"checkpoint '{path}' is truncated or corrupt: {e}") from e
    return params
