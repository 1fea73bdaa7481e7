"""Layer primitives with exact manual forward/backward passes.

Each layer owns its parameters, a matching gradient store, and a forward
cache. Backward overwrites the gradient store (one backward per forward);
training code zeroes grads and clears caches after every optimizer step.
Shapes exclude the batch axis in `out_shape`, which is what the network
builder uses to propagate extents.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import ParameterError, ShapeError, StateError
from .kaf import KafParams, init_alpha, kaf2d_backward, kaf2d_forward, kaf_backward, kaf_forward, make_dictionary
from .tensor import Tensor, as_tensor


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.cache = None

    def forward(self, x: Tensor, train: bool = True) -> Tensor:
        raise NotImplementedError

    def backward(self, gout: Tensor) -> Tensor:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def clear_cache(self) -> None:
        self.cache = None

    def _need_cache(self):
        if self.cache is None:
            raise StateError(f"{self.kind}: backward requires a forward pass since the last update")
        return self.cache


class Conv2d(Layer):
    """Valid (no padding) cross-correlation over NCHW inputs."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        self.params = {
            "weights": rng.normal(0.0, std, size=(out_channels, in_channels, kernel, kernel)),
            "bias": np.zeros(out_channels),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d: axis 1 (channels) has extent {c}, expected {self.in_channels}")
        if h < self.kernel or w < self.kernel:
            raise ShapeError(
                f"conv2d: spatial extents {h}x{w} smaller than the {self.kernel}x{self.kernel} kernel"
            )
        ho = (h - self.kernel) // self.stride + 1
        wo = (w - self.kernel) // self.stride + 1
        return (self.out_channels, ho, wo)

    def forward(self, x, train=True):
        x = as_tensor(x, "conv2d input")
        if x.ndim != 4:
            raise ShapeError(f"conv2d: expected NCHW input, got rank {x.ndim}")
        self.out_shape(x.shape[1:])
        out = _kernels.conv2d_forward(x, self.params["weights"], self.params["bias"], self.stride)
        if train:
            self.cache = x
        return out

    def backward(self, gout):
        x = self._need_cache()
        gout = as_tensor(gout, "conv2d upstream")
        gx, gw, gb = _kernels.conv2d_backward(x, self.params["weights"], self.stride, gout)
        self.grads["weights"][...] = gw
        self.grads["bias"][...] = gb
        return gx


class MaxPool2d(Layer):
    """Non-overlapping window max; ties go to the first element in row-major order."""

    kind = "maxpool2d"

    def __init__(self, window: int):
        super().__init__()
        self.window = window

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % self.window or w % self.window:
            raise ShapeError(
                f"maxpool2d: spatial extents {h}x{w} not divisible by window {self.window}"
            )
        return (c, h // self.window, w // self.window)

    def forward(self, x, train=True):
        x = as_tensor(x, "maxpool2d input")
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d: expected NCHW input, got rank {x.ndim}")
        self.out_shape(x.shape[1:])
        out, argmax = _kernels.maxpool2d_forward(x, self.window)
        if train:
            self.cache = (argmax, x.shape[2], x.shape[3])
        return out

    def backward(self, gout):
        argmax, h, w = self._need_cache()
        gout = as_tensor(gout, "maxpool2d upstream")
        return _kernels.maxpool2d_backward(gout, argmax, h, w)


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        std = np.sqrt(2.0 / in_features)
        self.params = {
            "weights": rng.normal(0.0, std, size=(in_features, out_features)),
            "bias": np.zeros(out_features),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(
                f"linear: axis 1 has extent {in_shape}, expected ({self.in_features},)"
            )
        return (self.out_features,)

    def forward(self, x, train=True):
        x = as_tensor(x, "linear input")
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"linear: axis 1 has extent {x.shape[1] if x.ndim == 2 else x.shape}, "
                f"expected {self.in_features}"
            )
        if train:
            self.cache = x
        return x @ self.params["weights"] + self.params["bias"]

    def backward(self, gout):
        x = self._need_cache()
        gout = as_tensor(gout, "linear upstream")
        self.grads["weights"][...] = x.T @ gout
        self.grads["bias"][...] = gout.sum(axis=0)
        return gout @ self.params["weights"].T


class ReLU(Layer):
    kind = "relu"

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, train=True):
        x = as_tensor(x, "relu input")
        if train:
            self.cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, gout):
        mask = self._need_cache()
        return as_tensor(gout, "relu upstream") * mask


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, train=True):
        x = as_tensor(x, "flatten input")
        if train:
            self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, gout):
        shape = self._need_cache()
        return as_tensor(gout, "flatten upstream").reshape(shape)


def _build_kaf_params(channels, d_size, bound, per_channel, pairwise, init, rng):
    dictionary, gamma = make_dictionary(d_size, bound)
    width = d_size * d_size if pairwise else d_size
    shape = (channels, width) if per_channel else (width,)
    probe = KafParams(dictionary, np.zeros(shape), gamma, per_channel=per_channel)
    if init == "random":
        alpha = init_alpha(probe, "random", rng=rng)
    elif init == "elu_fit":
        from .kaf import elu

        alpha = init_alpha(probe, "fit_target", target=elu)
    else:
        raise ParameterError(f"kaf: unknown alpha init {init!r}")
    return KafParams(dictionary, alpha, gamma, per_channel=per_channel)


class Kaf(Layer):
    """1-D kernel activation; one learnable mixture per channel by default."""

    kind = "kaf"

    def __init__(self, channels: int, d_size: int = 20, bound: float = 3.0,
                 per_channel: bool = True, init: str = "random",
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.channels = channels
        self.kaf_params = _build_kaf_params(channels, d_size, bound, per_channel, False, init, rng)
        self.params = {"alpha": self.kaf_params.alpha}
        self.grads = {"alpha": np.zeros_like(self.kaf_params.alpha)}

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"kaf: axis 1 has extent {in_shape[0]}, expected {self.channels}")
        return in_shape

    def forward(self, x, train=True):
        x = as_tensor(x, "kaf input")
        if train:
            self.cache = x
        return kaf_forward(x, self.kaf_params)

    def backward(self, gout):
        x = self._need_cache()
        galpha, gx = kaf_backward(x, gout, self.kaf_params)
        self.grads["alpha"][...] = galpha
        return gx


class Kaf2d(Layer):
    """Pairwise kernel activation; halves the channel count."""

    kind = "kaf2d"

    def __init__(self, channels: int, d_size: int = 20, bound: float = 3.0,
                 per_channel: bool = True, init: str = "random",
                 rng: np.random.Generator | None = None):
        super().__init__()
        if channels % 2 != 0:
            raise ShapeError(f"kaf2d: axis 1 must be even for channel pairing, got {channels}")
        self.channels = channels
        self.kaf_params = _build_kaf_params(channels // 2, d_size, bound, per_channel, True, init, rng)
        self.params = {"alpha": self.kaf_params.alpha}
        self.grads = {"alpha": np.zeros_like(self.kaf_params.alpha)}

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ShapeError(f"kaf2d: axis 1 has extent {in_shape[0]}, expected {self.channels}")
        return (self.channels // 2,) + tuple(in_shape[1:])

    def forward(self, x, train=True):
        x = as_tensor(x, "kaf2d input")
        if train:
            self.cache = x
        return kaf2d_forward(x, self.kaf_params)

    def backward(self, gout):
        x = self._need_cache()
        galpha, gx = kaf2d_backward(x, gout, self.kaf_params)
        self.grads["alpha"][...] = galpha
        return gx
