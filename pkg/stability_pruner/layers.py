"""Layer specifications, shape inference and the per-layer numeric kernels.

Convolution and max pooling are computed with im2col/col2im so that both
reduce to one BLAS matmul (conv) or one argmax (pool) per call. Activations
are laid out as (batch, channels, height, width).
"""
import enum
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from stability_pruner.errors import ConfigError, ShapeError
from stability_pruner.tensor import Tensor, matmul

Shape = Tuple[int, ...]

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class LayerKind(str, enum.Enum):
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    RELU = "relu"
    FLATTEN = "flatten"
    LINEAR = "linear"
    BATCHNORM2D = "batchnorm2d"


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model.

    ``in_channels``/``in_features``/``channels`` are resolved from the input
    shape when an Architecture is built, so a spec can be written with only
    the output-side numbers.
    """
    kind: LayerKind
    out_channels: int = 0
    kernel: Tuple[int, int] = (1, 1)
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    in_features: int = 0
    out_features: int = 0
    channels: int = 0
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def conv2d(cls, out_channels: int, kernel=3, stride: int = 1, padding: int = 0) -> "LayerSpec":
        if isinstance(kernel, int):
            kernel = (kernel, kernel)
        return cls(LayerKind.CONV2D, out_channels=out_channels, kernel=tuple(kernel),
                   stride=stride, padding=padding)

    @classmethod
    def maxpool2d(cls, window: int = 2, stride: Optional[int] = None) -> "LayerSpec":
        return cls(LayerKind.MAXPOOL2D, kernel=(window, window), stride=stride or window)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls(LayerKind.FLATTEN)

    @classmethod
    def linear(cls, out_features: int) -> "LayerSpec":
        return cls(LayerKind.LINEAR, out_features=out_features)

    @classmethod
    def batchnorm2d(cls, epsilon: float = BN_EPSILON, momentum: float = BN_MOMENTUM) -> "LayerSpec":
        return cls(LayerKind.BATCHNORM2D, epsilon=epsilon, momentum=momentum)

    @property
    def window(self) -> int:
        return self.kernel[0]

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONV2D, LayerKind.LINEAR, LayerKind.BATCHNORM2D)

    def validate(self, index: int) -> None:
        if self.kind == LayerKind.CONV2D:
            if self.out_channels < 1:
                raise ShapeError("conv out_channels must be >= 1", index)
            if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
                raise ShapeError(f"invalid conv geometry k={self.kernel} s={self.stride} "
                                 f"p={self.padding}", index)
        elif self.kind == LayerKind.MAXPOOL2D:
            if self.window < 1 or self.stride < 1:
                raise ShapeError("pool window and stride must be >= 1", index)
        elif self.kind == LayerKind.LINEAR:
            if self.out_features < 1:
                raise ShapeError("linear out_features must be >= 1", index)
        elif self.kind == LayerKind.BATCHNORM2D:
            if self.epsilon <= 0 or not 0 <= self.momentum <= 1:
                raise ShapeError("batchnorm needs epsilon > 0 and momentum in [0, 1]", index)

    def param_shapes(self) -> Dict[str, Shape]:
        if self.kind == LayerKind.CONV2D:
            kh, kw = self.kernel
            return {"weight": (self.out_channels, self.in_channels, kh, kw),
                    "bias": (self.out_channels,)}
        if self.kind == LayerKind.LINEAR:
            return {"weight": (self.out_features, self.in_features),
                    "bias": (self.out_features,)}
        if self.kind == LayerKind.BATCHNORM2D:
            return {"gamma": (self.channels,), "beta": (self.channels,)}
        return {}

    def buffer_shapes(self) -> Dict[str, Shape]:
        if self.kind == LayerKind.BATCHNORM2D:
            return {"running_mean": (self.channels,), "running_var": (self.channels,)}
        return {}


def conv_output_hw(h: int, w: int, kernel: Tuple[int, int], stride: int, padding: int) -> Tuple[int, int]:
    kh, kw = kernel
    return (h + 2 * padding - kh) // stride + 1, (w + 2 * padding - kw) // stride + 1


def output_shape(spec: LayerSpec, in_shape: Shape, index: int) -> Shape:
    """Per-sample output shape of ``spec`` applied to a per-sample ``in_shape``."""
    if spec.kind in (LayerKind.CONV2D, LayerKind.MAXPOOL2D, LayerKind.BATCHNORM2D):
        if len(in_shape) != 3:
            raise ShapeError(f"{spec.kind.value} needs a (C,H,W) input, got {in_shape}", index)
        c, h, w = in_shape
        if spec.kind == LayerKind.BATCHNORM2D:
            if spec.channels != c:
                raise ShapeError(f"batchnorm expects {spec.channels} channels, got {c}", index)
            return in_shape
        if spec.kind == LayerKind.CONV2D:
            if spec.in_channels != c:
                raise ShapeError(f"conv expects {spec.in_channels} input channels, got {c}", index)
            oh, ow = conv_output_hw(h, w, spec.kernel, spec.stride, spec.padding)
            if oh < 1 or ow < 1:
                raise ShapeError(f"conv kernel {spec.kernel} does not fit input {in_shape}", index)
            return (spec.out_channels, oh, ow)
        oh, ow = conv_output_hw(h, w, spec.kernel, spec.stride, 0)
        if oh < 1 or ow < 1:
            raise ShapeError(f"pool window {spec.window} does not fit input {in_shape}", index)
        return (c, oh, ow)
    if spec.kind == LayerKind.RELU:
        return in_shape
    if spec.kind == LayerKind.FLATTEN:
        return (int(np.prod(in_shape)),)
    if spec.kind == LayerKind.LINEAR:
        if len(in_shape) != 1:
            raise ShapeError(f"linear needs a flat input, got {in_shape}; add a flatten layer", index)
        if spec.in_features != in_shape[0]:
            raise ShapeError(f"linear expects {spec.in_features} features, got {in_shape[0]}", index)
        return (spec.out_features,)
    raise ConfigError(f"unknown layer kind {spec.kind!r}")


@dataclass(frozen=True)
class Architecture:
    """Ordered layer specs plus the per-sample input shape (C, H, W)."""
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]
    name: str = field(default="custom", compare=False)

    @classmethod
    def build(cls, layers: Sequence[LayerSpec], input_shape: Sequence[int], name: str = "custom") -> "Architecture":
        """Resolve input-side sizes of every layer by propagating ``input_shape``."""
        in_shape = tuple(int(d) for d in input_shape)
        if len(in_shape) != 3 or min(in_shape) < 1:
            raise ShapeError(f"input shape must be positive (C,H,W), got {in_shape}")
        resolved = []
        shape: Shape = in_shape
        for index, spec in enumerate(layers):
            if spec.kind == LayerKind.CONV2D:
                spec = replace(spec, in_channels=shape[0] if len(shape) == 3 else 0)
            elif spec.kind == LayerKind.BATCHNORM2D:
                spec = replace(spec, channels=shape[0] if len(shape) == 3 else 0)
            elif spec.kind == LayerKind.LINEAR:
                spec = replace(spec, in_features=shape[0] if len(shape) == 1 else 0)
            spec.validate(index)
            shape = output_shape(spec, shape, index)
            resolved.append(spec)
        arch = cls(tuple(resolved), in_shape, name)
        arch.validate()
        return arch

    def validate(self) -> None:
        if not self.layers:
            raise ShapeError("architecture has no layers")
        for index, spec in enumerate(self.layers):
            spec.validate(index)
        shapes = self.shapes()
        if len(shapes[-1][1]) != 1:
            raise ShapeError("the last layer must produce flat logits", len(self.layers) - 1)
        seen_linear = False
        for index, spec in enumerate(self.layers):
            if spec.kind == LayerKind.LINEAR:
                seen_linear = True
            elif seen_linear and spec.kind in (LayerKind.CONV2D, LayerKind.MAXPOOL2D,
                                               LayerKind.BATCHNORM2D, LayerKind.FLATTEN):
                raise ShapeError("spatial layers may not follow a linear layer", index)

    def shapes(self) -> List[Tuple[Shape, Shape]]:
        """(input, output) per-sample shape of every layer."""
        result = []
        shape: Shape = self.input_shape
        for index, spec in enumerate(self.layers):
            out = output_shape(spec, shape, index)
            result.append((shape, out))
            shape = out
        return result

    @property
    def conv_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == LayerKind.CONV2D]

    @property
    def linear_indices(self) -> List[int]:
        return [i for i, s in enumerate(self.layers) if s.kind == LayerKind.LINEAR]

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][1][0]

    def conv_widths(self) -> List[int]:
        return [self.layers[i].out_channels for i in self.conv_indices]

    def with_layers(self, layers: Sequence[LayerSpec]) -> "Architecture":
        arch = Architecture(tuple(layers), self.input_shape, self.name)
        arch.validate()
        return arch


# ---------------------------------------------------------------------------
# kernels


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """(B,C,H,W) -> (B*oh*ow, C*kh*kw) patch matrix, rows in (b, oy, ox) order."""
    b, c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, (kh, kw), stride, pad)
    img = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xk in range(kw):
            x_max = xk + stride * ow
            col[:, :, y, xk, :, :] = img[:, :, y:y_max:stride, xk:x_max:stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, -1), oh, ow


def col2im(col: np.ndarray, x_shape: Shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patch rows back onto a (B,C,H,W) image."""
    b, c, h, w = x_shape
    oh, ow = conv_output_hw(h, w, (kh, kw), stride, pad)
    col = col.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xk in range(kw):
            x_max = xk + stride * ow
            img[:, :, y:y_max:stride, xk:x_max:stride] += col[:, :, y, xk, :, :]
    if pad:
        return img[:, :, pad:pad + h, pad:pad + w]
    return img


def conv2d_forward(x, weight, bias, stride, padding):
    n, _, kh, kw = weight.shape
    col, oh, ow = im2col(x, kh, kw, stride, padding)
    out = col @ weight.reshape(n, -1).T + bias
    out = out.reshape(x.shape[0], oh, ow, n).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (col, x.shape)


def conv2d_backward(dout, cache, weight, stride, padding):
    col, x_shape = cache
    n, _, kh, kw = weight.shape
    dout_col = dout.transpose(0, 2, 3, 1).reshape(-1, n)
    dweight = (dout_col.T @ col).reshape(weight.shape)
    dbias = dout_col.sum(axis=0)
    dx = col2im(dout_col @ weight.reshape(n, -1), x_shape, kh, kw, stride, padding)
    return dx, dweight, dbias


def maxpool2d_forward(x, window, stride):
    b, c, h, w = x.shape
    col, oh, ow = im2col(x.reshape(b * c, 1, h, w), window, window, stride, 0)
    # np.argmax returns the first maximum in row-major window order.
    arg = np.argmax(col, axis=1)
    out = col[np.arange(col.shape[0]), arg].reshape(b, c, oh, ow)
    return out, (arg, x.shape, col.shape)


def maxpool2d_backward(dout, cache, window, stride):
    arg, x_shape, col_shape = cache
    b, c, h, w = x_shape
    dcol = np.zeros(col_shape, dtype=dout.dtype)
    dcol[np.arange(col_shape[0]), arg] = dout.reshape(-1)
    dx = col2im(dcol, (b * c, 1, h, w), window, window, stride, 0)
    return dx.reshape(x_shape)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def linear_forward(x, weight, bias):
    out = matmul(Tensor(x, x.dtype), Tensor(weight.T, weight.dtype)).data + bias
    return out, x


def linear_backward(dout, x, weight):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, spec: LayerSpec, train: bool):
    """Returns (out, cache); in train mode updates the running buffers in place."""
    shape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / (count - 1) if count > 1 else var
        m = spec.momentum
        running_mean *= 1 - m
        running_mean += m * mean
        running_var *= 1 - m
        running_var += m * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + spec.epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std)


def batchnorm2d_backward(dout, cache, gamma):
    xhat, inv_std = cache
    shape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    count = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    dx = (inv_std.reshape(shape) / count) * (
        count * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    return dx, dgamma, dbeta
