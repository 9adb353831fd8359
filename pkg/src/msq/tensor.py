"""Dense matrix helpers, seeded RNG, synthetic data and the matrix file format.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Convolution
weights are expected to arrive already lowered to GEMM form: one row per
output channel, ``Cin*K*K`` columns.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class MatrixFormatError(ValueError):
    """Raised when a matrix file is truncated or its header is malformed."""


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains NaN or Inf")
    return m


def matmul(a, b) -> np.ndarray:
    """GEMM with a fixed accumulation order.

    Every output element is accumulated as ``((a[i,0]*b[0,j]) + a[i,1]*b[1,j]) + ...``
    in float64, so results are reproducible bit-for-bit and match a naive
    triple loop exactly. Vectorized over ``(i, j)``; the loop runs over ``k``.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += np.multiply.outer(a[:, k], b[k, :])
    return out


def row_variance(w) -> np.ndarray:
    """Population variance (divide by ``cols``) of every row."""
    w = as_matrix(w)
    if w.shape[0] < 1 or w.shape[1] < 2:
        raise DegenerateInputError(f"row variance needs rows >= 1 and cols >= 2, got {w.shape}")
    mean = w.mean(axis=1, keepdims=True)
    return ((w - mean) ** 2).mean(axis=1)


class Rng:
    """Seeded counter-based generator (Philox4x64).

    Philox is a pure function of (key, counter), so a seed yields the same
    stream on every platform. ``spawn`` derives independent child streams.
    """

    def __init__(self, seed: int):
        if not 0 <= seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, index: int) -> "Rng":
        # Distinct key per child; mixes with a 64-bit odd constant.
        return Rng((self.seed * 0x9E3779B97F4A7C15 + index + 1) % 2**64)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ShapeError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return self.inputs.shape[0]

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        """First ``n_first`` samples and the rest, e.g. a train/test split."""
        a = Dataset(self.inputs[:n_first], self.labels[:n_first], self.num_classes)
        b = Dataset(self.inputs[n_first:], self.labels[n_first:], self.num_classes)
        return a, b


def make_synthetic(
    num_classes: int,
    n: int,
    rng: Rng,
    n_features: int = 8,
    separation: float = 4.0,
    spread: float = 1.0,
) -> Dataset:
    """Gaussian blobs, one per class, with means on a sphere of radius ``separation``.

    Class means are drawn from the generator first, then the samples, so the
    same seed always produces the same means.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_classes < 2:
        raise ValueError("need at least two classes")
    directions = rng.normal(size=(num_classes, n_features))
    means = separation * directions / np.linalg.norm(directions, axis=1, keepdims=True)
    labels = rng.integers(0, num_classes, size=n)
    inputs = means[labels] + spread * rng.normal(size=(n, n_features))
    return Dataset(inputs=inputs, labels=labels.astype(np.int64), num_classes=num_classes)


# --- matrix file format ---------------------------------------------------
#
# line 1: decimal byte length of the JSON header, then "\n"
# header: {"rows", "cols", "dtype", "byte_order": "little"}
# body:   rows*cols little-endian values, row-major
#
# dtype is "f32" for weights/activations; "i64" carries integer GEMM outputs.

_DTYPES = {"f32": "<f4", "i64": "<i8"}


def encode_matrix(m: np.ndarray, dtype: str = "f32") -> bytes:
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError("only 2-D matrices can be written")
    header = json.dumps(
        {"rows": m.shape[0], "cols": m.shape[1], "dtype": dtype, "byte_order": "little"},
        sort_keys=True,
    ).encode()
    body = np.ascontiguousarray(m, dtype=_DTYPES[dtype]).tobytes()
    return f"{len(header)}\n".encode() + header + body


def decode_matrix(raw: bytes) -> np.ndarray:
    nl = raw.find(b"\n")
    if nl <= 0:
        raise MatrixFormatError("missing header length line")
    try:
        hlen = int(raw[:nl].decode("ascii"))
        header = json.loads(raw[nl + 1 : nl + 1 + hlen].decode())
        rows, cols, dtype = int(header["rows"]), int(header["cols"]), header["dtype"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise MatrixFormatError(f"bad header: {exc}") from exc
    if header.get("byte_order", "little") != "little" or dtype not in _DTYPES:
        raise MatrixFormatError(f"unsupported layout {header}")
    if rows < 0 or cols < 0:
        raise MatrixFormatError("negative dimensions")
    body = raw[nl + 1 + hlen :]
    np_dtype = np.dtype(_DTYPES[dtype])
    if len(body) != rows * cols * np_dtype.itemsize:
        raise MatrixFormatError(
            f"body has {len(body)} bytes, expected {rows * cols * np_dtype.itemsize}"
        )
    m = np.frombuffer(body, dtype=np_dtype).reshape(rows, cols)
    if dtype == "f32":
        m = m.astype(np.float64)
        if not np.all(np.isfinite(m)):
            raise MatrixFormatError("matrix contains NaN or Inf")
        return m
    return m.astype(np.int64)


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def write_matrix(path, m: np.ndarray, dtype: str = "f32") -> None:
    atomic_write_bytes(path, encode_matrix(m, dtype))


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a sibling temp file then rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
