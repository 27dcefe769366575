"""Dense n-dimensional array value type.

A Tensor wraps a C-ordered (row-major) numpy buffer that is frozen at
construction. Operations never broadcast: every shape mismatch raises.
"""
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple, Union

import numpy as np

from stability_pruner.errors import ConfigError, NumericError, ShapeError

FLOAT32 = np.dtype(np.float32)
FLOAT64 = np.dtype(np.float64)
SUPPORTED_DTYPES = (FLOAT32, FLOAT64)

Scalar = Union[int, float]
Seed = Union[int, Sequence[int]]


def _check_shape(shape: Iterable[int]) -> Tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    if not dims:
        raise ShapeError("shape must have at least one dimension")
    if any(d < 1 for d in dims):
        raise ShapeError(f"dimensions must be >= 1, got {dims}")
    return dims


def _check_dtype(dtype) -> np.dtype:
    dtype = np.dtype(dtype)
    if dtype not in SUPPORTED_DTYPES:
        raise ConfigError(f"unsupported dtype {dtype}; use float32 or float64")
    return dtype


class Tensor:
    __slots__ = ("_data",)

    def __init__(self, data, dtype=FLOAT32):
        arr = np.array(data, dtype=_check_dtype(dtype), order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Takes ownership of a freshly computed array without copying.
        tensor = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        tensor._data = arr
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the buffer."""
        return self._data

    def numpy(self) -> np.ndarray:
        """Writable copy of the buffer."""
        return self._data.copy()

    def flat(self) -> np.ndarray:
        return self._data.reshape(-1)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        dims = _check_shape(shape)
        if int(np.prod(dims)) != self.size:
            raise ShapeError(f"cannot reshape {self.shape} into {dims}")
        return Tensor._wrap(self._data.reshape(dims))

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data, dtype=dtype)

    def validate_finite(self, name: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self._data)):
            bad = int(np.count_nonzero(~np.isfinite(self._data)))
            raise NumericError(f"{name} has {bad} non-finite element(s)")
        return self

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return (self.shape == other.shape and self.dtype == other.dtype
                and np.array_equal(self._data, other._data))

    def __hash__(self):
        return hash((self.shape, self._data.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def zeros(shape: Sequence[int], dtype=FLOAT32) -> Tensor:
    return full(shape, 0.0, dtype)


def ones(shape: Sequence[int], dtype=FLOAT32) -> Tensor:
    return full(shape, 1.0, dtype)


def full(shape: Sequence[int], value: Scalar, dtype=FLOAT32) -> Tensor:
    return Tensor._wrap(np.full(_check_shape(shape), value, dtype=_check_dtype(dtype)))


def _operand(a: Tensor, b: Union[Tensor, Scalar], op: str) -> Union[np.ndarray, Scalar]:
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
        return b.data
    return b


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return Tensor._wrap((a.data + _operand(a, b, "add")).astype(a.dtype, copy=False))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return Tensor._wrap((a.data - _operand(a, b, "sub")).astype(a.dtype, copy=False))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    return Tensor._wrap((a.data * _operand(a, b, "mul")).astype(a.dtype, copy=False))


def scale(a: Tensor, factor: Scalar) -> Tensor:
    return Tensor._wrap((a.data * a.dtype.type(factor)).astype(a.dtype, copy=False))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} x {b.shape}")
    return Tensor._wrap(a.data @ b.data)


def abs_sum(a: Union[Tensor, np.ndarray]) -> float:
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return float(np.sum(np.abs(data), dtype=np.float64))


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def validate(self) -> None:
        if not (np.isfinite(self.low) and np.isfinite(self.high)) or self.low > self.high:
            raise ConfigError(f"invalid uniform bounds ({self.low}, {self.high})")


@dataclass(frozen=True)
class Normal:
    mean: float
    std: float

    def validate(self) -> None:
        if not (np.isfinite(self.mean) and np.isfinite(self.std)) or self.std < 0:
            raise ConfigError(f"invalid normal parameters ({self.mean}, {self.std})")


Distribution = Union[Uniform, Normal]


def generator(seed: Seed) -> np.random.Generator:
    """The repository's pinned PRNG: PCG64 seeded from an int or int sequence."""
    return np.random.Generator(np.random.PCG64(seed))


def rng_fill(shape: Sequence[int], seed: Seed, distribution: Distribution, dtype=FLOAT32) -> Tensor:
    dims = _check_shape(shape)
    distribution.validate()
    rng = generator(seed)
    if isinstance(distribution, Uniform):
        values = rng.uniform(distribution.low, distribution.high, size=dims)
    elif isinstance(distribution, Normal):
        values = rng.normal(distribution.mean, distribution.std, size=dims)
    else:
        raise ConfigError(f"unknown distribution {distribution!r}")
    return Tensor._wrap(values.astype(_check_dtype(dtype)))
