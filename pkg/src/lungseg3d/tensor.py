"""Dense rank-5 tensor container used throughout the package.

Layout is fixed: (batch, channel, depth, height, width), row-major with the
width index fastest. Binary ops require exact shape equality -- there is no
broadcasting at this level, which keeps shape bugs loud.
"""
from __future__ import annotations

import json
import os

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class Tensor5:
    """A contiguous (B, C, D, H, W) array of f32 or f64 scalars."""

    __slots__ = ("data",)

    def __init__(self, data: np.ndarray):
        arr = np.ascontiguousarray(data)
        if arr.ndim != 5:
            raise ValueError(f"Tensor5 requires rank 5, got rank {arr.ndim}")
        if arr.dtype not in _DTYPE_NAMES:
            raise ValueError(f"Tensor5 supports f32/f64, got {arr.dtype}")
        self.data = arr

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    @property
    def size(self) -> int:
        return self.data.size

    def __getitem__(self, idx):
        return self.data[idx]

    def __setitem__(self, idx, value):
        self.data[idx] = value

    def __repr__(self):
        return f"Tensor5(shape={self.shape}, dtype={self.dtype})"

    def copy(self) -> "Tensor5":
        return Tensor5(self.data.copy())

    def astype(self, dtype: str) -> "Tensor5":
        return Tensor5(self.data.astype(DTYPES[dtype]))


def tensor_new(shape, fill: float = 0.0, dtype: str = "f64") -> Tensor5:
    """Allocate a tensor of `shape` with every element set to `fill`."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ValueError(f"expected 5 dims, got {len(shape)}")
    if any(s < 0 for s in shape):
        raise ValueError(f"negative dimension in shape {shape}")
    return Tensor5(np.full(shape, fill, dtype=DTYPES[dtype]))


def from_array(arr, dtype: str | None = None) -> Tensor5:
    """Wrap an array-like as a Tensor5, optionally coercing the dtype."""
    a = np.asarray(arr)
    if dtype is not None:
        a = a.astype(DTYPES[dtype])
    elif a.dtype not in _DTYPE_NAMES:
        a = a.astype(np.float64)
    return Tensor5(a)


def tensor_map2(a: Tensor5, b: Tensor5, op: str) -> Tensor5:
    """Elementwise add/sub/mul of two tensors of identical shape."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if op == "add":
        return Tensor5(a.data + b.data)
    if op == "sub":
        return Tensor5(a.data - b.data)
    if op == "mul":
        return Tensor5(a.data * b.data)
    raise ValueError(f"unknown op {op!r}")


def tensor_reduce(a: Tensor5, op: str) -> float:
    """Reduce all elements to a scalar with sum/max/mean."""
    if op == "sum":
        return float(a.data.sum())
    if a.size == 0:
        raise ValueError(f"{op} of an empty tensor is undefined")
    if op == "max":
        return float(a.data.max())
    if op == "mean":
        return float(a.data.mean())
    raise ValueError(f"unknown op {op!r}")


def save_array(arr: np.ndarray, base_path: str) -> None:
    """Write `arr` as `<base>.raw` (little-endian) plus a `<base>.json` sidecar.

    The raw file holds the buffer in row-major order; the sidecar records
    shape and dtype so the pair round-trips bit-exactly.
    """
    arr = np.asarray(arr)  # not ascontiguousarray: that would upgrade 0-d to 1-d
    name = _DTYPE_NAMES.get(arr.dtype)
    if name is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    with open(base_path + ".raw", "wb") as f:
        f.write(le.tobytes())  # tobytes always emits row-major order
    sidecar = {"shape": [int(s) for s in arr.shape], "dtype": name}
    with open(base_path + ".json", "w") as f:
        json.dump(sidecar, f)


def load_array(base_path: str) -> np.ndarray:
    """Read an array written by save_array."""
    with open(base_path + ".json") as f:
        sidecar = json.load(f)
    shape = tuple(int(s) for s in sidecar["shape"])
    np_dtype = DTYPES[sidecar["dtype"]]
    raw = np.fromfile(base_path + ".raw", dtype=np.dtype(np_dtype).newbyteorder("<"))
    expected = int(np.prod(shape)) if shape else 1
    if raw.size != expected:
        raise ValueError(
            f"{base_path}.raw holds {raw.size} elements, sidecar shape {shape} "
            f"needs {expected}"
        )
    return raw.astype(np_dtype).reshape(shape)


def save_tensor5(t: Tensor5, base_path: str) -> None:
    save_array(t.data, base_path)


def load_tensor5(base_path: str) -> Tensor5:
    arr = load_array(base_path)
    if arr.ndim != 5:
        raise ValueError(f"{base_path} holds a rank-{arr.ndim} array, expected 5")
    return Tensor5(arr)


def exists(base_path: str) -> bool:
    return os.path.exists(base_path + ".raw") and os.path.exists(base_path + ".json")
