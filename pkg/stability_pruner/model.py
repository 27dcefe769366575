"""The model graph: an Architecture plus its parameter and buffer tensors.

Parameters are named ``"<layer index>.<name>"`` (``3.weight``, ``3.bias``,
``1.gamma``...). BatchNorm running statistics live in ``buffers``; they are
saved with the model but never receive gradients.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from stability_pruner import layers as L
from stability_pruner.errors import ConfigError, ShapeError, StaleCacheError
from stability_pruner.layers import Architecture, LayerKind
from stability_pruner.losses import filter_attraction_grad, softmax_cross_entropy
from stability_pruner.tensor import FLOAT32, Tensor, Uniform, ones, rng_fill, zeros

logger = logging.getLogger(__name__)

Gradients = Dict[str, np.ndarray]
MODES = ("train", "eval")


@dataclass
class BatchActivations:
    """Per-layer outputs and backward caches of one forward pass."""
    mode: str
    layer_signature: Tuple
    outputs: List[np.ndarray] = field(default_factory=list)
    caches: List[object] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.outputs[0].shape[0] if self.outputs else 0


def _as_array(batch: Union[Tensor, np.ndarray]) -> np.ndarray:
    return batch.data if isinstance(batch, Tensor) else np.asarray(batch)


def tensor_shapes(architecture: Architecture) -> Tuple[Dict[str, Tuple[int, ...]], Dict[str, Tuple[int, ...]]]:
    """Named parameter and buffer shapes of every layer, in layer order."""
    params, buffers = {}, {}
    for index, spec in enumerate(architecture.layers):
        params.update({f"{index}.{k}": v for k, v in spec.param_shapes().items()})
        buffers.update({f"{index}.{k}": v for k, v in spec.buffer_shapes().items()})
    return params, buffers


class ModelGraph:
    def __init__(self, architecture: Architecture, params: Dict[str, np.ndarray],
                 buffers: Optional[Dict[str, np.ndarray]] = None, dtype=FLOAT32):
        self.architecture = architecture
        self.dtype = np.dtype(dtype)
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}
        self.buffers = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in (buffers or {}).items()}
        self.validate()

    @classmethod
    def initialize(cls, architecture: Architecture, seed: int = 0, dtype=FLOAT32) -> "ModelGraph":
        """Uniform ±sqrt(6/fan_in) weights, zero biases, BN gain 1 / shift 0."""
        params, buffers = {}, {}
        for index, spec in enumerate(architecture.layers):
            shapes = spec.param_shapes()
            if spec.kind in (LayerKind.CONV2D, LayerKind.LINEAR):
                w_shape = shapes["weight"]
                fan_in = int(np.prod(w_shape[1:]))
                bound = float(np.sqrt(6.0 / fan_in))
                params[f"{index}.weight"] = rng_fill(w_shape, (seed, index), Uniform(-bound, bound), dtype).numpy()
                params[f"{index}.bias"] = zeros(shapes["bias"], dtype).numpy()
            elif spec.kind == LayerKind.BATCHNORM2D:
                params[f"{index}.gamma"] = ones(shapes["gamma"], dtype).numpy()
                params[f"{index}.beta"] = zeros(shapes["beta"], dtype).numpy()
                buffers[f"{index}.running_mean"] = zeros((spec.channels,), dtype).numpy()
                buffers[f"{index}.running_var"] = ones((spec.channels,), dtype).numpy()
        return cls(architecture, params, buffers, dtype)

    # -- structure -----------------------------------------------------------

    def expected_shapes(self) -> Tuple[Dict[str, Tuple[int, ...]], Dict[str, Tuple[int, ...]]]:
        return tensor_shapes(self.architecture)

    def validate(self) -> None:
        self.architecture.validate()
        expected_params, expected_buffers = self.expected_shapes()
        for kind, actual, expected in (("parameter", self.params, expected_params),
                                       ("buffer", self.buffers, expected_buffers)):
            if set(actual) != set(expected):
                missing = sorted(set(expected) - set(actual))
                extra = sorted(set(actual) - set(expected))
                raise ShapeError(f"{kind} names mismatch: missing {missing}, unexpected {extra}")
            for name, shape in expected.items():
                if actual[name].shape != tuple(shape):
                    raise ShapeError(f"{kind} {name} has shape {actual[name].shape}, expected {shape}",
                                     int(name.split(".")[0]))

    @property
    def layers(self):
        return self.architecture.layers

    @property
    def input_shape(self):
        return self.architecture.input_shape

    @property
    def num_conv(self) -> int:
        return len(self.architecture.conv_indices)

    @property
    def num_linear(self) -> int:
        return len(self.architecture.linear_indices)

    def conv_widths(self) -> List[int]:
        return self.architecture.conv_widths()

    def filters(self, conv_index: int) -> np.ndarray:
        """Weight tensor (n_i, c_in, kh, kw) of the layer at ``conv_index``."""
        return self.params[f"{conv_index}.weight"]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy(self) -> "ModelGraph":
        return ModelGraph(self.architecture,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.buffers.items()},
                          self.dtype)

    def astype(self, dtype) -> "ModelGraph":
        return ModelGraph(self.architecture,
                          {k: v.astype(dtype) for k, v in self.params.items()},
                          {k: v.astype(dtype) for k, v in self.buffers.items()},
                          dtype)

    def tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Parameters then buffers, in layer order."""
        expected_params, expected_buffers = self.expected_shapes()
        return ([(k, self.params[k]) for k in expected_params]
                + [(k, self.buffers[k]) for k in expected_buffers])

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(repr((self.architecture.layers, self.architecture.input_shape)).encode())
        for name, value in self.tensors():
            digest.update(name.encode())
            digest.update(value.dtype.str.encode())
            digest.update(value.tobytes())
        return digest.hexdigest()

    def same_architecture(self, other: "ModelGraph") -> bool:
        return self.architecture == other.architecture

    # -- compute -------------------------------------------------------------

    def _signature(self) -> Tuple:
        return self.architecture.layers

    def forward(self, batch: Union[Tensor, np.ndarray], mode: str = "eval") -> Tuple[np.ndarray, BatchActivations]:
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
        x = _as_array(batch)
        if x.ndim != 4 or x.shape[0] < 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match (B>=1, *{self.input_shape})", 0)
        x = x.astype(self.dtype, copy=False)
        train = mode == "train"
        cache = BatchActivations(mode=mode, layer_signature=self._signature())
        for index, spec in enumerate(self.layers):
            x, layer_cache = self._forward_layer(index, spec, x, train)
            cache.outputs.append(x)
            cache.caches.append(layer_cache)
        return x, cache

    def _forward_layer(self, index, spec, x, train):
        p = self.params
        try:
            if spec.kind == LayerKind.CONV2D:
                return L.conv2d_forward(x, p[f"{index}.weight"], p[f"{index}.bias"], spec.stride, spec.padding)
            if spec.kind == LayerKind.MAXPOOL2D:
                return L.maxpool2d_forward(x, spec.window, spec.stride)
            if spec.kind == LayerKind.RELU:
                return L.relu_forward(x)
            if spec.kind == LayerKind.FLATTEN:
                return x.reshape(x.shape[0], -1), x.shape
            if spec.kind == LayerKind.LINEAR:
                return L.linear_forward(x, p[f"{index}.weight"], p[f"{index}.bias"])
            if spec.kind == LayerKind.BATCHNORM2D:
                return L.batchnorm2d_forward(x, p[f"{index}.gamma"], p[f"{index}.beta"],
                                             self.buffers[f"{index}.running_mean"],
                                             self.buffers[f"{index}.running_var"], spec, train)
        except ValueError as exc:
            raise ShapeError(str(exc), index) from exc
        raise ConfigError(f"unknown layer kind {spec.kind!r}")

    def backward(self, cache: Optional[BatchActivations], labels: Sequence[int], lam: float = 0.0,
                 aux_form: str = "abs") -> Tuple[float, Gradients]:
        """Data loss of the cached forward pass, and gradients of C + lam*S."""
        if cache is None or not cache.outputs:
            raise StaleCacheError("backward needs the cache of a forward pass")
        if cache.mode != "train":
            raise StaleCacheError("backward needs a train-mode forward pass")
        if cache.layer_signature != self._signature():
            raise StaleCacheError("cache was produced by a different architecture")
        if lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {lam}")

        data_loss, dout = softmax_cross_entropy(cache.outputs[-1], np.asarray(labels))
        grads: Gradients = {}
        for index in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[index]
            layer_cache = cache.caches[index]
            if spec.kind == LayerKind.CONV2D:
                weight = self.params[f"{index}.weight"]
                dout, dw, db = L.conv2d_backward(dout, layer_cache, weight, spec.stride, spec.padding)
                if lam > 0:
                    dw = dw + lam * filter_attraction_grad(weight, aux_form)
                grads[f"{index}.weight"], grads[f"{index}.bias"] = dw, db
            elif spec.kind == LayerKind.MAXPOOL2D:
                dout = L.maxpool2d_backward(dout, layer_cache, spec.window, spec.stride)
            elif spec.kind == LayerKind.RELU:
                dout = L.relu_backward(dout, layer_cache)
            elif spec.kind == LayerKind.FLATTEN:
                dout = dout.reshape(layer_cache)
            elif spec.kind == LayerKind.LINEAR:
                dout, dw, db = L.linear_backward(dout, layer_cache, self.params[f"{index}.weight"])
                grads[f"{index}.weight"], grads[f"{index}.bias"] = dw, db
            elif spec.kind == LayerKind.BATCHNORM2D:
                dout, dgamma, dbeta = L.batchnorm2d_backward(dout, layer_cache, self.params[f"{index}.gamma"])
                grads[f"{index}.gamma"], grads[f"{index}.beta"] = dgamma, dbeta
        grads = {k: grads[k].astype(self.dtype, copy=False) for k in self.params}
        return data_loss, grads

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode argmax class per image."""
        if len(images) == 0:
            raise ConfigError("cannot predict on an empty set of images")
        predictions = []
        for start in range(0, len(images), batch_size):
            logits, _ = self.forward(images[start:start + batch_size], mode="eval")
            predictions.append(np.argmax(logits, axis=1))
        return np.concatenate(predictions)

    def accuracy(self, dataset, batch_size: int = 256) -> float:
        if len(dataset) == 0:
            raise ConfigError("cannot compute accuracy of an empty dataset")
        predictions = self.predict(dataset.images, batch_size)
        return float(np.mean(predictions == dataset.labels))

    def __repr__(self) -> str:
        return (f"ModelGraph({self.architecture.name}, widths={self.conv_widths()}, "
                f"params={self.parameter_count()})")


def error_percent(accuracy: float) -> float:
    return 100.0 * (1.0 - accuracy)
