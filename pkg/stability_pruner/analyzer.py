from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from stability_pruner.architectures import VGG16_CONV_NAMES
from stability_pruner.errors import ConfigError
from stability_pruner.layers import Architecture, LayerKind

# one fused multiply-add is one FLOP; TRM(B) = model bytes + B * feature-map bytes per sample
BYTES_PER_ELEMENT = 4
MAP_PRODUCERS = (LayerKind.CONV2D, LayerKind.LINEAR, LayerKind.MAXPOOL2D)


def _positive(**values: int) -> None:
    for name, value in values.items():
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")


def flops_conv(c_in: int, w_k: int, h_k: int, w_o: int, h_o: int, c_o: int, batch_size: int = 1) -> int:
    _positive(c_in=c_in, w_k=w_k, h_k=h_k, w_o=w_o, h_o=h_o, c_o=c_o, batch_size=batch_size)
    return c_in * w_k * h_k * w_o * h_o * c_o * batch_size


def flops_fc(c_in: int, c_o: int, batch_size: int = 1) -> int:
    _positive(c_in=c_in, c_o=c_o, batch_size=batch_size)
    return c_in * c_o * batch_size


@dataclass
class LayerCost:
    index: int
    name: str
    kind: str
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    flops: int
    params: int
    weight_bytes: int
    featuremap_bytes: int

    def to_record(self) -> Dict:
        record = asdict(self)
        record["record"] = "layer"
        record["input_shape"] = list(self.input_shape)
        record["output_shape"] = list(self.output_shape)
        return record


@dataclass
class CostReport:
    architecture: str
    batch_size: int
    layers: List[LayerCost] = field(default_factory=list)

    @property
    def flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    @property
    def params(self) -> int:
        return sum(layer.params for layer in self.layers)

    @property
    def model_size_bytes(self) -> int:
        return sum(layer.weight_bytes for layer in self.layers)

    @property
    def featuremap_bytes(self) -> int:
        return sum(layer.featuremap_bytes for layer in self.layers)

    @property
    def trm_bytes(self) -> int:
        return self.model_size_bytes + self.featuremap_bytes

    def totals_record(self) -> Dict:
        return {
            "record": "totals",
            "architecture": self.architecture,
            "batch_size": self.batch_size,
            "flops": self.flops,
            "params": self.params,
            "model_size_bytes": self.model_size_bytes,
            "featuremap_bytes": self.featuremap_bytes,
            "trm_bytes": self.trm_bytes,
        }

    def to_records(self) -> List[Dict]:
        return [layer.to_record() for layer in self.layers] + [self.totals_record()]


def _architecture(model) -> Architecture:
    return model if isinstance(model, Architecture) else model.architecture


def layer_names(arch: Architecture) -> List[str]:
    """conv1, conv2, fc1... (conv1_1..conv5_3 for 13-conv VGG-16 models)."""
    conv_names = None
    if len(arch.conv_indices) == len(VGG16_CONV_NAMES) and arch.name.startswith("vgg16"):
        conv_names = list(VGG16_CONV_NAMES)
    names, counters = [], {}
    for spec in arch.layers:
        counters[spec.kind] = counters.get(spec.kind, 0) + 1
        n = counters[spec.kind]
        if spec.kind == LayerKind.CONV2D:
            names.append(conv_names[n - 1] if conv_names else f"conv{n}")
        elif spec.kind == LayerKind.LINEAR:
            names.append(f"fc{n}")
        else:
            names.append(f"{spec.kind.value}{n}")
    return names


def _layer_params(spec) -> int:
    return int(sum(np.prod(shape) for shape in spec.param_shapes().values()))


def memory_report(model: Union[Architecture, object], batch_size: int = 1) -> CostReport:
    """Per-layer FLOPS, parameters, weight bytes and feature-map bytes at ``batch_size``.

    Feature maps are the outputs of conv, linear and max-pool layers, each counted
    once; ReLU, batchnorm and flatten outputs are treated as in place and add none.
    """
    _positive(batch_size=batch_size)
    arch = _architecture(model)
    report = CostReport(arch.name, batch_size)
    for index, (spec, name, (in_shape, out_shape)) in enumerate(zip(arch.layers, layer_names(arch), arch.shapes())):
        if spec.kind == LayerKind.CONV2D:
            c_o, h_o, w_o = out_shape
            kh, kw = spec.kernel
            flops = flops_conv(in_shape[0], kw, kh, w_o, h_o, c_o, batch_size)
        elif spec.kind == LayerKind.LINEAR:
            flops = flops_fc(in_shape[0], out_shape[0], batch_size)
        else:
            flops = 0
        params = _layer_params(spec)
        fm = BYTES_PER_ELEMENT * int(np.prod(out_shape)) * batch_size if spec.kind in MAP_PRODUCERS else 0
        report.layers.append(LayerCost(index, name, spec.kind.value, tuple(in_shape), tuple(out_shape),
                                       int(flops), params, BYTES_PER_ELEMENT * params, fm))
    return report


def flops_total(model, batch_size: int = 1) -> int:
    return memory_report(model, batch_size).flops


def param_count(model) -> int:
    """Weights + biases + batchnorm gain/shift (running statistics are not parameters)."""
    return sum(_layer_params(spec) for spec in _architecture(model).layers)


def model_size(model) -> Tuple[int, int]:
    """(parameter count, bytes)."""
    params = param_count(model)
    return params, BYTES_PER_ELEMENT * params


def trm_curve(model, batch_sizes: Iterable[int]) -> List[Tuple[int, int]]:
    return [(b, memory_report(model, b).trm_bytes) for b in batch_sizes]


@dataclass
class CompressionSummary:
    batch_size: int
    flops_before: int
    flops_after: int
    params_before: int
    params_after: int
    trm_before: int
    trm_after: int

    @property
    def flops_ratio(self) -> float:
        return self.flops_before / self.flops_after

    @property
    def flops_pruned_percent(self) -> float:
        return 100.0 * (1 - self.flops_after / self.flops_before)

    @property
    def params_ratio(self) -> float:
        return self.params_before / self.params_after

    @property
    def params_pruned_percent(self) -> float:
        return 100.0 * (1 - self.params_after / self.params_before)

    @property
    def trm_ratio(self) -> float:
        return self.trm_before / self.trm_after

    def to_record(self) -> Dict:
        record = {"record": "compression"}
        record.update(asdict(self))
        record.update(flops_ratio=self.flops_ratio, flops_pruned_percent=self.flops_pruned_percent,
                      params_ratio=self.params_ratio, params_pruned_percent=self.params_pruned_percent,
                      trm_ratio=self.trm_ratio)
        return record


def compression_summary(before: CostReport, after: CostReport) -> CompressionSummary:
    if before.batch_size != after.batch_size:
        raise ConfigError(f"reports use different batch sizes ({before.batch_size} vs {after.batch_size})")
    return CompressionSummary(before.batch_size, before.flops, after.flops, before.params, after.params,
                              before.trm_bytes, after.trm_bytes)


def layerwise_flops_comparison(before: CostReport, after: CostReport) -> List[Dict]:
    """Per conv/fc layer FLOPS of an original and a pruned model, matched by name."""
    after_by_name = {layer.name: layer for layer in after.layers}
    rows = []
    for layer in before.layers:
        if layer.kind not in (LayerKind.CONV2D.value, LayerKind.LINEAR.value):
            continue
        pruned = after_by_name.get(layer.name)
        if pruned is None:
            raise ConfigError(f"layer {layer.name} missing from the pruned report")
        rows.append({"record": "layer_flops", "name": layer.name, "flops_before": layer.flops,
                     "flops_after": pruned.flops})
    return rows


def top_flops_layers(report: CostReport, count: int, kind: str = LayerKind.CONV2D.value) -> List[str]:
    """Names of the ``count`` most expensive layers of ``kind`` (ties keep layer order)."""
    layers = [layer for layer in report.layers if layer.kind == kind]
    ranked = sorted(layers, key=lambda layer: (-layer.flops, layer.index))
    return [layer.name for layer in ranked[:count]]


class CostAnalyzer:
    """Cost reports of one architecture over several batch sizes."""

    def __init__(self, model):
        self.architecture = _architecture(model)

    def report(self, batch_size: int = 1) -> CostReport:
        return memory_report(self.architecture, batch_size)

    def reports(self, batch_sizes: Sequence[int]) -> List[CostReport]:
        return [self.report(b) for b in batch_sizes]

    def compare(self, other, batch_size: int = 1) -> CompressionSummary:
        return compression_summary(self.report(batch_size), CostAnalyzer(other).report(batch_size))
