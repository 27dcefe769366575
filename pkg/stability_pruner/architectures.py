"""Built-in architectures and the one-layer-per-line description format.

Example description::

    input 1x28x28
    conv out=20 k=5 stride=1 pad=0
    relu
    pool k=2 stride=2
    flatten
    linear out=10
"""
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Union

from stability_pruner.errors import ConfigError, PrunerError
from stability_pruner.layers import Architecture, LayerKind, LayerSpec

LENET5_WIDTHS = (20, 50)
VGG16_BASELINE_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_PRUN1_WIDTHS = (31, 53, 84, 84, 146, 146, 146, 117, 62, 62, 62, 62, 62)
VGG16_PRUN2_WIDTHS = (20, 50, 71, 71, 116, 116, 116, 87, 42, 42, 42, 42, 42)
VGG16_CONV_NAMES = ("conv1_1", "conv1_2", "conv2_1", "conv2_2", "conv3_1", "conv3_2", "conv3_3",
                    "conv4_1", "conv4_2", "conv4_3", "conv5_1", "conv5_2", "conv5_3")
# Index (within the 13 conv layers) after which a 2x2 max pool closes a block.
VGG16_POOL_AFTER = (1, 3, 6, 9, 12)


def lenet5(widths: Sequence[int] = LENET5_WIDTHS, hidden: int = 500, classes: int = 10) -> Architecture:
    """28x28 -> conv5x5 -> pool2 -> conv5x5 -> pool2 -> flatten(800) -> fc500 -> fc10."""
    c1, c2 = widths
    layers = [
        LayerSpec.conv2d(c1, 5), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(c2, 5), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.flatten(),
        LayerSpec.linear(hidden), LayerSpec.relu(),
        LayerSpec.linear(classes),
    ]
    return Architecture.build(layers, (1, 28, 28), name="lenet5")


def vgg16_cifar(widths: Sequence[int] = VGG16_BASELINE_WIDTHS, hidden: int = 512, classes: int = 10,
                name: str = "vgg16_cifar") -> Architecture:
    """VGG-16 for 32x32x3 inputs: 13 conv3x3 (pad 1) + BN + ReLU, five pools, FC hidden -> classes."""
    if len(widths) != 13:
        raise ConfigError(f"VGG-16 needs 13 conv widths, got {len(widths)}")
    layers: List[LayerSpec] = []
    for i, width in enumerate(widths):
        layers += [LayerSpec.conv2d(width, 3, padding=1), LayerSpec.batchnorm2d(), LayerSpec.relu()]
        if i in VGG16_POOL_AFTER:
            layers.append(LayerSpec.maxpool2d(2))
    layers += [LayerSpec.flatten(), LayerSpec.linear(hidden), LayerSpec.relu(), LayerSpec.linear(classes)]
    return Architecture.build(layers, (3, 32, 32), name=name)


BUILTIN: Dict[str, Callable[[], Architecture]] = {
    "lenet5": lenet5,
    "vgg16_cifar": vgg16_cifar,
    "vgg16_prun1": lambda: vgg16_cifar(VGG16_PRUN1_WIDTHS, name="vgg16_prun1"),
    "vgg16_prun2": lambda: vgg16_cifar(VGG16_PRUN2_WIDTHS, name="vgg16_prun2"),
}

_KIND_ALIASES = {
    "conv": LayerKind.CONV2D, "conv2d": LayerKind.CONV2D,
    "pool": LayerKind.MAXPOOL2D, "maxpool": LayerKind.MAXPOOL2D, "maxpool2d": LayerKind.MAXPOOL2D,
    "relu": LayerKind.RELU,
    "flatten": LayerKind.FLATTEN,
    "linear": LayerKind.LINEAR, "fc": LayerKind.LINEAR,
    "bn": LayerKind.BATCHNORM2D, "batchnorm": LayerKind.BATCHNORM2D, "batchnorm2d": LayerKind.BATCHNORM2D,
}


def _kernel(value: str):
    dims = tuple(int(d) for d in value.lower().split("x"))
    if len(dims) == 1:
        return dims[0]
    if len(dims) != 2:
        raise ValueError(value)
    return dims


def _parse_options(tokens: List[str], lineno: int) -> Dict[str, str]:
    options = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep or not value:
            raise ConfigError(f"line {lineno}: expected key=value, got {token!r}")
        options[key] = value
    return options


def _layer_from_line(kind: LayerKind, options: Dict[str, str], lineno: int) -> LayerSpec:
    def take(key, cast, default=None):
        if key not in options:
            if default is None:
                raise ConfigError(f"line {lineno}: {kind.value} needs {key}=")
            return default
        try:
            return cast(options.pop(key))
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}") from None

    if kind == LayerKind.CONV2D:
        spec = LayerSpec.conv2d(take("out", int), take("k", _kernel), take("stride", int, 1), take("pad", int, 0))
    elif kind == LayerKind.MAXPOOL2D:
        window = take("k", int, 2)
        spec = LayerSpec.maxpool2d(window, take("stride", int, window))
    elif kind == LayerKind.LINEAR:
        spec = LayerSpec.linear(take("out", int))
    elif kind == LayerKind.BATCHNORM2D:
        spec = LayerSpec.batchnorm2d(take("eps", float, 1e-5), take("momentum", float, 0.1))
    else:
        spec = LayerSpec(kind)
    if options:
        raise ConfigError(f"line {lineno}: unknown option(s) {sorted(options)} for {kind.value}")
    return spec


def parse_architecture(text: str, name: str = "custom") -> Architecture:
    input_shape = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *tokens = line.split()
        head = head.lower()
        if head == "input":
            try:
                input_shape = tuple(int(d) for d in tokens[0].lower().split("x"))
            except (IndexError, ValueError):
                raise ConfigError(f"line {lineno}: expected 'input CxHxW'") from None
            continue
        if head not in _KIND_ALIASES:
            raise ConfigError(f"line {lineno}: unknown layer kind {head!r}")
        layers.append(_layer_from_line(_KIND_ALIASES[head], _parse_options(tokens, lineno), lineno))
    if input_shape is None:
        raise ConfigError("architecture description has no 'input CxHxW' line")
    try:
        return Architecture.build(layers, input_shape, name=name)
    except PrunerError as exc:
        raise ConfigError(f"malformed architecture: {exc}") from exc


def format_architecture(arch: Architecture) -> str:
    lines = ["input " + "x".join(str(d) for d in arch.input_shape)]
    for spec in arch.layers:
        if spec.kind == LayerKind.CONV2D:
            kh, kw = spec.kernel
            k = str(kh) if kh == kw else f"{kh}x{kw}"
            lines.append(f"conv out={spec.out_channels} k={k} stride={spec.stride} pad={spec.padding}")
        elif spec.kind == LayerKind.MAXPOOL2D:
            lines.append(f"pool k={spec.window} stride={spec.stride}")
        elif spec.kind == LayerKind.LINEAR:
            lines.append(f"linear out={spec.out_features}")
        elif spec.kind == LayerKind.BATCHNORM2D:
            lines.append(f"bn eps={spec.epsilon!r} momentum={spec.momentum!r}")
        else:
            lines.append(spec.kind.value)
    return "\n".join(lines) + "\n"


def resolve_architecture(name_or_path: Union[str, Path]) -> Architecture:
    """A built-in name, or the path of a description file."""
    key = str(name_or_path)
    if key in BUILTIN:
        return BUILTIN[key]()
    path = Path(key)
    if not path.is_file():
        raise ConfigError(f"unknown architecture {key!r}: not a built-in ({', '.join(BUILTIN)}) "
                          f"and no such file")
    return parse_architecture(path.read_text(encoding="utf-8"), name=path.stem)
