"""Dense tensors, arithmetic kernels and the seeded random generator.

Storage is row-major (C order). Values default to float32; inside
``check_mode()`` every constructor and kernel switches to float64 so that
finite-difference verification is meaningful.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DomainError, ShapeError

_policy = threading.local()


def get_dtype() -> np.dtype:
    return getattr(_policy, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def check_mode(enabled: bool = True) -> Iterator[None]:
    """Run the enclosed block with 64-bit reals."""
    previous = get_dtype()
    _policy.dtype = np.dtype(np.float64) if enabled else np.dtype(np.float32)
    try:
        yield
    finally:
        _policy.dtype = previous


def _validate_dims(dims: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims:
        raise ShapeError("dims must be non-empty")
    if any(d < 1 for d in dims):
        raise ShapeError(f"every extent must be >= 1, got {dims}")
    return dims


class Tensor:
    """An N-dimensional array of reals with validated, non-empty extents."""

    __slots__ = ("_array",)

    def __init__(self, values, dims: Sequence[int] | None = None, dtype=None):
        dtype = np.dtype(dtype) if dtype is not None else get_dtype()
        arr = np.array(values, dtype=dtype, order="C")
        if dims is not None:
            dims = _validate_dims(dims)
            if arr.size != int(np.prod(dims)):
                raise ShapeError(
                    f"data length {arr.size} does not match dims {dims}")
            arr = arr.reshape(dims)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _validate_dims(arr.shape)
        self._array = arr

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Adopt an existing array without copying."""
        t = cls.__new__(cls)
        arr = np.ascontiguousarray(arr)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _validate_dims(arr.shape)
        t._array = arr
        return t

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> "Tensor":
        return cls.wrap(np.zeros(_validate_dims(dims), dtype=get_dtype()))

    @classmethod
    def ones(cls, dims: Sequence[int]) -> "Tensor":
        return cls.wrap(np.ones(_validate_dims(dims), dtype=get_dtype()))

    @classmethod
    def identity(cls, n: int) -> "Tensor":
        return cls.wrap(np.eye(n, dtype=get_dtype()))

    @property
    def dims(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self._array.reshape(-1)

    @property
    def dtype(self) -> np.dtype:
        return self._array.dtype

    def numpy(self) -> np.ndarray:
        return self._array

    def reshape(self, dims: Sequence[int]) -> "Tensor":
        dims = _validate_dims(dims)
        if int(np.prod(dims)) != self._array.size:
            raise ShapeError(f"cannot reshape {self.dims} to {dims}")
        return Tensor.wrap(self._array.reshape(dims))

    def __len__(self) -> int:
        return self._array.size

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.dtype.name})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self._array, other._array)

    __hash__ = None

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with 64-bit accumulation, stored in the active dtype."""
    a, b = as_tensor(a), as_tensor(b)
    if len(a.dims) != 2 or len(b.dims) != 2 or a.dims[1] != b.dims[0]:
        raise ShapeError(f"matmul: cannot multiply {a.dims} by {b.dims}")
    out = a.numpy().astype(np.float64) @ b.numpy().astype(np.float64)
    return Tensor.wrap(out.astype(np.result_type(a.dtype, b.dtype)))


def _broadcastable(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    if small == big or int(np.prod(small)) == 1:
        return True
    # trailing-dimension broadcast only: small must be a suffix of big
    return len(small) <= len(big) and big[len(big) - len(small):] == small


_UNARY = {
    "exp": np.exp,
    "cos": np.cos,
    "acos": lambda v: np.arccos(np.clip(v, -1.0, 1.0)),
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def elementwise(op: str, *operands) -> Tensor:
    """Apply ``op`` element by element.

    Binary ops accept an equal-shaped operand, a one-element operand, or one
    whose dims are a trailing suffix of the other's. ``scale`` takes a tensor
    and a Python scalar.
    """
    if op in _UNARY or op == "log":
        if len(operands) != 1:
            raise ValueError(f"{op} takes one operand")
        t = as_tensor(operands[0])
        v = t.numpy()
        if op == "log":
            if np.any(v <= 0):
                raise DomainError("log of a non-positive value")
            return Tensor.wrap(np.log(v))
        return Tensor.wrap(_UNARY[op](v).astype(t.dtype, copy=False))
    if op == "scale":
        t, s = operands
        t = as_tensor(t)
        return Tensor.wrap((t.numpy() * t.dtype.type(s)).astype(t.dtype))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    if len(operands) != 2:
        raise ValueError(f"{op} takes two operands")
    a, b = (as_tensor(o) for o in operands)
    if _broadcastable(a.dims, b.dims):
        big, small, swap = a, b, False
    elif _broadcastable(b.dims, a.dims):
        big, small, swap = b, a, True
    else:
        raise ShapeError(f"{op}: dims {a.dims} and {b.dims} are not broadcast-compatible")
    sv = small.numpy()
    if int(np.prod(small.dims)) == 1:
        sv = sv.reshape(())
    lhs, rhs = (sv, big.numpy()) if swap else (big.numpy(), sv)
    return Tensor.wrap(_BINARY[op](lhs, rhs))


def reduce(op: str, t: Tensor, axis: int) -> Tensor:
    """Reduce along ``axis``; the axis is removed from the result.

    ``argmax`` breaks ties toward the lowest index and returns indices as
    reals so the result is still a Tensor.
    """
    t = as_tensor(t)
    rank = len(t.dims)
    if not -rank <= axis < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    v = t.numpy()
    if op == "sum":
        out = v.sum(axis=axis, dtype=np.float64)
    elif op == "mean":
        out = v.mean(axis=axis, dtype=np.float64)
    elif op == "max":
        out = v.max(axis=axis)
    elif op == "argmax":
        out = v.argmax(axis=axis)  # numpy returns the first maximal index
    else:
        raise ValueError(f"unknown reduction {op!r}")
    return Tensor.wrap(np.asarray(out).astype(t.dtype))


# ---------------------------------------------------------------------------
# random numbers
# ---------------------------------------------------------------------------

_INV_2_53 = 1.0 / (1 << 53)


class Rng:
    """Seeded generator with a platform-independent output stream.

    Raw 64-bit words come from PCG64 (XSL-RR 128/64) seeded through numpy's
    SeedSequence. Everything above the raw words is done here: a uniform
    double is ``(word >> 11) * 2**-53``, integers in ``[0, n)`` are
    ``floor(u * n)``, normals use Box-Muller on pairs of uniforms. Extra
    integer keys select independent sub-streams, e.g. ``Rng(seed, epoch,
    clip_id)``.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self._bits = np.random.PCG64(ss)

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def _uniform(self, n: int) -> np.ndarray:
        if n == 0:
            return np.empty(0)
        words = self._bits.random_raw(n)
        return (words >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def random(self) -> float:
        return float(self._uniform(1)[0])

    def uniform(self, dims: Sequence[int], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        dims = _validate_dims(dims)
        u = self._uniform(int(np.prod(dims))).reshape(dims)
        return low + (high - low) * u

    def normal(self, dims: Sequence[int], mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        if std < 0:
            raise DomainError("std must be >= 0")
        dims = _validate_dims(dims)
        n = int(np.prod(dims))
        pairs = (n + 1) // 2
        u = self._uniform(2 * pairs)
        u1 = 1.0 - u[:pairs]  # (0, 1], keeps log finite
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u[pairs:]
        z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:n]
        return (mean + std * z).reshape(dims)

    def integers(self, n: int, size: int | None = None):
        if n < 1:
            raise DomainError("integers() needs n >= 1")
        count = 1 if size is None else size
        v = np.minimum((self._uniform(count) * n).astype(np.int64), n - 1)
        return int(v[0]) if size is None else v

    def bernoulli(self, p: float) -> bool:
        return self.random() < p

    def choice(self, seq: Sequence):
        return seq[self.integers(len(seq))]

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self._uniform(n - 1)
        for idx, i in enumerate(range(n - 1, 0, -1)):
            j = min(int(draws[idx] * (i + 1)), i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    @property
    def state(self) -> dict:
        return self._bits.state

    @state.setter
    def state(self, value: dict) -> None:
        self._bits.state = value


def rng_uniform(rng: Rng, dims: Sequence[int]) -> Tensor:
    return Tensor.wrap(rng.uniform(dims).astype(get_dtype()))


def rng_normal(rng: Rng, dims: Sequence[int], mean: float = 0.0, std: float = 1.0) -> Tensor:
    return Tensor.wrap(rng.normal(dims, mean, std).astype(get_dtype()))
