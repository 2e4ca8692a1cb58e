"""
Layer kinds of the numpy network core.

Tensors are float64 in NCHW layout (N, channels, height, width); dense layers
take (N, features). Every layer caches what backward needs during forward and
releases it after backward. Parameter gradients accumulate until zero_grad().
"""

from abc import ABC, abstractmethod
from enum import Enum
from typing import Dict, Literal, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from src.errors import MissingConditioning, NoCache, ShapeError

Shape = Tuple[int, ...]


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    CONV2D_TRANSPOSE = "conv2d_transpose"
    DENSE = "dense"
    BATCH_NORM = "batch_norm"
    RELU = "relu"
    SOFTMAX = "softmax"
    AVERAGE_POOL_GLOBAL = "average_pool_global"
    FILM = "film"
    FLATTEN = "flatten"
    RESHAPE = "reshape"
    CROP = "crop"


class LayerSpec(BaseModel):
    """Architecture entry; `units` is output channels for convs and width for dense/FiLM"""
    model_config = ConfigDict(frozen=True)

    kind: LayerKind
    units: Optional[int] = Field(None, gt=0)
    kernel: int = Field(1, gt=0)
    stride: int = Field(1, gt=0)
    padding: Literal["same", "valid"] = "same"
    shape: Optional[Tuple[int, ...]] = Field(None, description="Target shape for reshape/crop")

    @classmethod
    def conv2d(cls, filters: int, kernel: int = 3, stride: int = 1, padding: str = "same") -> "LayerSpec":
        return cls(kind=LayerKind.CONV2D, units=filters, kernel=kernel, stride=stride, padding=padding)

    @classmethod
    def conv2d_transpose(cls, filters: int, kernel: int = 3, stride: int = 1) -> "LayerSpec":
        return cls(kind=LayerKind.CONV2D_TRANSPOSE, units=filters, kernel=kernel, stride=stride, padding="valid")

    @classmethod
    def dense(cls, units: int) -> "LayerSpec":
        return cls(kind=LayerKind.DENSE, units=units)

    @classmethod
    def film(cls, units: int) -> "LayerSpec":
        return cls(kind=LayerKind.FILM, units=units)

    @classmethod
    def of(cls, kind: LayerKind, shape: Optional[Shape] = None) -> "LayerSpec":
        return cls(kind=kind, shape=tuple(shape) if shape is not None else None)


class Layer(ABC):
    """Base layer: build() fixes shapes and parameters, forward()/backward() run a batch"""
    kind: LayerKind

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.input_shape: Shape = ()
        self.output_shape: Shape = ()
        self._cache = None

    def build(self, input_shape: Shape, rng: np.random.Generator, conditioning_dim: int = 0) -> Shape:
        """Validate the per-example input shape, create parameters, return the output shape"""
        self.input_shape = tuple(input_shape)
        self.output_shape = self._build(self.input_shape, rng, conditioning_dim)
        self.grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        return self.output_shape

    @abstractmethod
    def _build(self, input_shape: Shape, rng: np.random.Generator, conditioning_dim: int) -> Shape:
        pass

    @abstractmethod
    def forward(self, x: np.ndarray, training: bool = False, conditioning: Optional[np.ndarray] = None) -> np.ndarray:
        pass

    @abstractmethod
    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input"""
        pass

    def zero_grad(self) -> None:
        for grad in self.grads.values():
            grad.fill(0.0)

    def clear_cache(self) -> None:
        self._cache = None

    def _pop_cache(self):
        if self._cache is None:
            raise NoCache(f"{self.kind.value}: backward() without a cached forward()")
        cache, self._cache = self._cache, None
        return cache

    @property
    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))


def _uniform(rng: np.random.Generator, limit: float, shape: Shape) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape)


def _same_padding(size: int, kernel: int, stride: int) -> Tuple[int, int, int]:
    """(output size, pad before, pad after), TensorFlow 'same' convention"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


class Conv2D(Layer):
    kind = LayerKind.CONV2D

    def __init__(self, filters: int, kernel: int = 3, stride: int = 1, padding: str = "same"):
        super().__init__()
        self.filters = filters
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.pads = (0, 0, 0, 0)

    def _build(self, input_shape, rng, conditioning_dim):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d expects (channels, height, width), got {input_shape}")
        channels, height, width = input_shape
        k, s = self.kernel, self.stride
        if self.padding == "same":
            out_h, top, bottom = _same_padding(height, k, s)
            out_w, left, right = _same_padding(width, k, s)
        else:
            if height < k or width < k:
                raise ShapeError(f"input {height}x{width} smaller than kernel {k}")
            out_h, out_w = (height - k) // s + 1, (width - k) // s + 1
            top = bottom = left = right = 0
        self.pads = (top, bottom, left, right)
        fan_in = channels * k * k
        self.params = {
            "weight": _uniform(rng, np.sqrt(6.0 / fan_in), (self.filters, channels, k, k)),
            "bias": np.zeros(self.filters),
        }
        return self.filters, out_h, out_w

    def _windows(self, padded: np.ndarray) -> np.ndarray:
        _, out_h, out_w = self.output_shape
        s = self.stride
        windows = sliding_window_view(padded, (self.kernel, self.kernel), axis=(2, 3))
        return windows[:, :, ::s, ::s][:, :, :out_h, :out_w]

    def forward(self, x, training=False, conditioning=None):
        top, bottom, left, right = self.pads
        padded = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
        windows = self._windows(padded)
        out = np.tensordot(windows, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        self._cache = padded
        return out.transpose(0, 3, 1, 2) + self.params["bias"][None, :, None, None]

    def backward(self, grad):
        padded = self._pop_cache()
        weight = self.params["weight"]
        windows = self._windows(padded)
        self.grads["weight"] += np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] += grad.sum(axis=(0, 2, 3))

        _, out_h, out_w = self.output_shape
        s = self.stride
        d_padded = np.zeros_like(padded)
        for i in range(self.kernel):
            for j in range(self.kernel):
                contribution = np.tensordot(grad, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                d_padded[:, :, i:i + s * out_h:s, j:j + s * out_w:s] += contribution
        top, _, left, _ = self.pads
        _, height, width = self.input_shape
        return d_padded[:, :, top:top + height, left:left + width]


class Conv2DTranspose(Layer):
    """Valid transposed convolution: out = (in - 1) * stride + kernel"""
    kind = LayerKind.CONV2D_TRANSPOSE

    def __init__(self, filters: int, kernel: int = 3, stride: int = 1):
        super().__init__()
        self.filters = filters
        self.kernel = kernel
        self.stride = stride

    def _build(self, input_shape, rng, conditioning_dim):
        if len(input_shape) != 3:
            raise ShapeError(f"conv2d_transpose expects (channels, height, width), got {input_shape}")
        channels, height, width = input_shape
        k, s = self.kernel, self.stride
        fan_in = channels * k * k
        self.params = {
            "weight": _uniform(rng, np.sqrt(6.0 / fan_in), (channels, self.filters, k, k)),
            "bias": np.zeros(self.filters),
        }
        return self.filters, (height - 1) * s + k, (width - 1) * s + k

    def _grad_windows(self, grad: np.ndarray) -> np.ndarray:
        _, height, width = self.input_shape
        s = self.stride
        windows = sliding_window_view(grad, (self.kernel, self.kernel), axis=(2, 3))
        return windows[:, :, ::s, ::s][:, :, :height, :width]

    def forward(self, x, training=False, conditioning=None):
        _, height, width = self.input_shape
        _, out_h, out_w = self.output_shape
        s = self.stride
        weight = self.params["weight"]
        out = np.zeros((x.shape[0], self.filters, out_h, out_w))
        for i in range(self.kernel):
            for j in range(self.kernel):
                contribution = np.tensordot(x, weight[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                out[:, :, i:i + s * height:s, j:j + s * width:s] += contribution
        self._cache = x
        return out + self.params["bias"][None, :, None, None]

    def backward(self, grad):
        x = self._pop_cache()
        windows = self._grad_windows(grad)
        self.grads["weight"] += np.tensordot(x, windows, axes=([0, 2, 3], [0, 2, 3]))
        self.grads["bias"] += grad.sum(axis=(0, 2, 3))
        dx = np.tensordot(windows, self.params["weight"], axes=([1, 4, 5], [1, 2, 3]))
        return dx.transpose(0, 3, 1, 2)


class Dense(Layer):
    kind = LayerKind.DENSE

    def __init__(self, units: int):
        super().__init__()
        self.units = units

    def _build(self, input_shape, rng, conditioning_dim):
        if len(input_shape) != 1:
            raise ShapeError(f"dense expects a flat input, got {input_shape}")
        fan_in = input_shape[0]
        self.params = {
            "weight": _uniform(rng, np.sqrt(3.0 / fan_in), (fan_in, self.units)),
            "bias": np.zeros(self.units),
        }
        return (self.units,)

    def forward(self, x, training=False, conditioning=None):
        self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        x = self._pop_cache()
        self.grads["weight"] += x.T @ grad
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"].T


class BatchNorm(Layer):
    """Normalizes over every axis but the channel axis (axis 1)"""
    kind = LayerKind.BATCH_NORM

    def __init__(self, epsilon: float = 1e-3, momentum: float = 0.9):
        super().__init__()
        self.epsilon = epsilon
        self.momentum = momentum

    def _build(self, input_shape, rng, conditioning_dim):
        channels = input_shape[0]
        self.params = {"gamma": np.ones(channels), "beta": np.zeros(channels)}
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        return input_shape

    def _axes(self, x: np.ndarray) -> Tuple[int, ...]:
        return (0,) + tuple(range(2, x.ndim))

    def _expand(self, vector: np.ndarray, ndim: int) -> np.ndarray:
        return vector.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, training=False, conditioning=None):
        axes = self._axes(x)
        if training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.buffers["running_mean"] = self.momentum * self.buffers["running_mean"] + (1 - self.momentum) * mean
            self.buffers["running_var"] = self.momentum * self.buffers["running_var"] + (1 - self.momentum) * var
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        x_hat = (x - self._expand(mean, x.ndim)) * self._expand(inv_std, x.ndim)
        self._cache = (x_hat, inv_std, training)
        return self._expand(self.params["gamma"], x.ndim) * x_hat + self._expand(self.params["beta"], x.ndim)

    def backward(self, grad):
        x_hat, inv_std, training = self._pop_cache()
        axes = self._axes(grad)
        ndim = grad.ndim
        self.grads["gamma"] += (grad * x_hat).sum(axis=axes)
        self.grads["beta"] += grad.sum(axis=axes)

        d_x_hat = grad * self._expand(self.params["gamma"], ndim)
        if not training:
            return d_x_hat * self._expand(inv_std, ndim)
        count = grad.size // grad.shape[1]
        mean_d = self._expand(d_x_hat.sum(axis=axes), ndim) / count
        mean_dx = self._expand((d_x_hat * x_hat).sum(axis=axes), ndim) / count
        return self._expand(inv_std, ndim) * (d_x_hat - mean_d - x_hat * mean_dx)


class ReLU(Layer):
    kind = LayerKind.RELU

    def _build(self, input_shape, rng, conditioning_dim):
        return input_shape

    def forward(self, x, training=False, conditioning=None):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._pop_cache()


class Softmax(Layer):
    kind = LayerKind.SOFTMAX

    def _build(self, input_shape, rng, conditioning_dim):
        return input_shape

    def forward(self, x, training=False, conditioning=None):
        out = softmax(x)
        self._cache = out
        return out

    def backward(self, grad):
        s = self._pop_cache()
        return s * (grad - (grad * s).sum(axis=-1, keepdims=True))


class GlobalAveragePool(Layer):
    """(N, C, H, W) -> (N, C)"""
    kind = LayerKind.AVERAGE_POOL_GLOBAL

    def _build(self, input_shape, rng, conditioning_dim):
        if len(input_shape) != 3:
            raise ShapeError(f"global pooling expects (channels, height, width), got {input_shape}")
        return (input_shape[0],)

    def forward(self, x, training=False, conditioning=None):
        self._cache = True
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        self._pop_cache()
        _, height, width = self.input_shape
        return np.broadcast_to(grad[:, :, None, None] / (height * width),
                               grad.shape + (height, width)).copy()


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def _build(self, input_shape, rng, conditioning_dim):
        return (int(np.prod(input_shape)),)

    def forward(self, x, training=False, conditioning=None):
        self._cache = True
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        self._pop_cache()
        return grad.reshape((grad.shape[0],) + self.input_shape)


class Reshape(Layer):
    kind = LayerKind.RESHAPE

    def __init__(self, shape: Shape):
        super().__init__()
        self.shape = tuple(shape)

    def _build(self, input_shape, rng, conditioning_dim):
        if int(np.prod(input_shape)) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {input_shape} into {self.shape}")
        return self.shape

    def forward(self, x, training=False, conditioning=None):
        self._cache = True
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, grad):
        self._pop_cache()
        return grad.reshape((grad.shape[0],) + self.input_shape)


class Crop2D(Layer):
    """Keep the top-left (height, width) of every channel"""
    kind = LayerKind.CROP

    def __init__(self, shape: Shape):
        super().__init__()
        self.shape = tuple(shape)

    def _build(self, input_shape, rng, conditioning_dim):
        channels, height, width = input_shape
        target_h, target_w = self.shape
        if target_h > height or target_w > width:
            raise ShapeError(f"cannot crop {height}x{width} to {target_h}x{target_w}")
        return channels, target_h, target_w

    def forward(self, x, training=False, conditioning=None):
        self._cache = True
        target_h, target_w = self.shape
        return x[:, :, :target_h, :target_w]

    def backward(self, grad):
        self._pop_cache()
        out = np.zeros((grad.shape[0],) + self.input_shape)
        target_h, target_w = self.shape
        out[:, :, :target_h, :target_w] = grad
        return out


class FiLM(Layer):
    """o = (y @ W_alpha + b_alpha) * z + (y @ W_beta + b_beta); y is the conditioning vector"""
    kind = LayerKind.FILM

    def __init__(self, units: int):
        super().__init__()
        self.units = units
        self.conditioning_dim = 0

    def _build(self, input_shape, rng, conditioning_dim):
        if input_shape != (self.units,):
            raise ShapeError(f"FiLM width {self.units} does not match input {input_shape}")
        if conditioning_dim <= 0:
            raise ShapeError("FiLM layer needs a positive conditioning width")
        self.conditioning_dim = conditioning_dim
        limit = np.sqrt(3.0 / conditioning_dim)
        self.params = {
            "alpha_weight": _uniform(rng, limit, (conditioning_dim, self.units)),
            "alpha_bias": np.ones(self.units),
            "beta_weight": _uniform(rng, limit, (conditioning_dim, self.units)),
            "beta_bias": np.zeros(self.units),
        }
        return input_shape

    def modulation(self, conditioning: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(alpha, beta), each (N, units)"""
        alpha = conditioning @ self.params["alpha_weight"] + self.params["alpha_bias"]
        beta = conditioning @ self.params["beta_weight"] + self.params["beta_bias"]
        return alpha, beta

    def forward(self, x, training=False, conditioning=None):
        if conditioning is None:
            raise MissingConditioning("FiLM layer needs a conditioning vector")
        conditioning = np.atleast_2d(np.asarray(conditioning, dtype=np.float64))
        if conditioning.shape != (x.shape[0], self.conditioning_dim):
            raise ShapeError(f"conditioning shape {conditioning.shape} does not match "
                             f"({x.shape[0]}, {self.conditioning_dim})")
        alpha, beta = self.modulation(conditioning)
        self._cache = (x, conditioning, alpha)
        return alpha * x + beta

    def backward(self, grad):
        x, conditioning, alpha = self._pop_cache()
        d_alpha = grad * x
        self.grads["alpha_weight"] += conditioning.T @ d_alpha
        self.grads["alpha_bias"] += d_alpha.sum(axis=0)
        self.grads["beta_weight"] += conditioning.T @ grad
        self.grads["beta_bias"] += grad.sum(axis=0)
        return grad * alpha


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis"""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def make_layer(spec: LayerSpec) -> Layer:
    """Instantiate an unbuilt layer from its spec"""
    kind = spec.kind
    if kind == LayerKind.CONV2D:
        return Conv2D(spec.units, spec.kernel, spec.stride, spec.padding)
    if kind == LayerKind.CONV2D_TRANSPOSE:
        return Conv2DTranspose(spec.units, spec.kernel, spec.stride)
    if kind == LayerKind.DENSE:
        return Dense(spec.units)
    if kind == LayerKind.FILM:
        return FiLM(spec.units)
    if kind == LayerKind.BATCH_NORM:
        return BatchNorm()
    if kind == LayerKind.RELU:
        return ReLU()
    if kind == LayerKind.SOFTMAX:
        return Softmax()
    if kind == LayerKind.AVERAGE_POOL_GLOBAL:
        return GlobalAveragePool()
    if kind == LayerKind.FLATTEN:
        return Flatten()
    if kind == LayerKind.RESHAPE:
        return Reshape(spec.shape)
    if kind == LayerKind.CROP:
        return Crop2D(spec.shape)
    raise ShapeError(f"unknown layer kind {kind}")
