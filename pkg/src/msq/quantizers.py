"""Weight level sets, nearest-level projection and integer code words.

Three weight schemes are supported, all sign-magnitude with one sign bit:

* ``FixedPoint(bits)``: levels ``k / (2**(bits-1) - 1)``.
* ``PowerOfTwo(bits)``: levels ``2**-e`` for ``e`` in ``0 .. 2**(bits-1) - 2``.
* ``SP2(m1, m2)``: levels ``q1 + q2`` where ``q1`` (``q2``) is zero or
  ``2**-e`` with ``e`` in ``1 .. 2**m1 - 1`` (``2**m2 - 1``).

Every scheme's unit magnitudes are rationals ``numerator / denominator``;
fixed-point uses the odd denominator ``2**(bits-1) - 1`` and the shift-based
schemes a power of two. The kernel module relies on those integer numerators.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence, Union

import numpy as np

from .partition import RowPartition
from .tensor import ShapeError, as_matrix


class SchemeError(ValueError):
    pass


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class FixedPoint:
    bits: int

    def __post_init__(self):
        if self.bits < 2:
            raise SchemeError(f"fixed-point needs bits >= 2, got {self.bits}")

    @property
    def denominator(self) -> int:
        return 2 ** (self.bits - 1) - 1


@dataclass(frozen=True)
class PowerOfTwo:
    bits: int

    def __post_init__(self):
        if self.bits < 2:
            raise SchemeError(f"power-of-2 needs bits >= 2, got {self.bits}")

    @property
    def max_exponent(self) -> int:
        return 2 ** (self.bits - 1) - 2

    @property
    def denominator(self) -> int:
        return 2**self.max_exponent


@dataclass(frozen=True)
class SP2:
    m1: int
    m2: int

    def __post_init__(self):
        if not self.m1 >= self.m2 >= 1:
            raise SchemeError(f"SP2 needs m1 >= m2 >= 1, got m1={self.m1}, m2={self.m2}")

    @property
    def bits(self) -> int:
        return self.m1 + self.m2 + 1

    @property
    def max_exponent(self) -> int:
        return 2**self.m1 - 1

    @property
    def denominator(self) -> int:
        return 2**self.max_exponent


QuantScheme = Union[FixedPoint, PowerOfTwo, SP2]


def scheme_to_dict(scheme: QuantScheme) -> dict:
    if isinstance(scheme, FixedPoint):
        return {"kind": "fixed", "bits": scheme.bits}
    if isinstance(scheme, PowerOfTwo):
        return {"kind": "p2", "bits": scheme.bits}
    if isinstance(scheme, SP2):
        return {"kind": "sp2", "m1": scheme.m1, "m2": scheme.m2}
    raise SchemeError(f"unknown scheme {scheme!r}")


def scheme_from_dict(d: dict) -> QuantScheme:
    kind = d.get("kind")
    if kind == "fixed":
        return FixedPoint(int(d["bits"]))
    if kind == "p2":
        return PowerOfTwo(int(d["bits"]))
    if kind == "sp2":
        return SP2(int(d["m1"]), int(d["m2"]))
    raise SchemeError(f"unknown scheme kind {kind!r}")


@dataclass(frozen=True)
class CodeWord:
    """Sign plus scheme payload.

    Fixed-point words use ``magnitude``; power-of-2 words use ``e1``; SP2 words
    use ``e1`` (the term from the ``m1``-bit set) and ``e2`` (the ``m2``-bit
    set). An exponent ``e`` stands for the term ``2**-e``; ``None`` is the
    explicit-zero flag. Zero is always encoded with ``sign=+1``.
    """

    sign: int
    magnitude: int | None = None
    e1: int | None = None
    e2: int | None = None


# --- level tables -----------------------------------------------------------


@dataclass(frozen=True)
class _Table:
    # Signed entries sorted by value. numerators are exact ints over denominator.
    numerators: tuple
    denominator: int
    ratios: np.ndarray
    codes: np.ndarray
    words: tuple


def _sign_bit(scheme) -> int:
    return 1 << (scheme.bits - 1)


def _positive_entries(scheme: QuantScheme) -> dict:
    """Map unit-magnitude Fraction -> (packed magnitude code, CodeWord payload)."""
    out = {}
    if isinstance(scheme, FixedPoint):
        den = scheme.denominator
        for k in range(den + 1):
            out[Fraction(k, den)] = (k, {"magnitude": k})
    elif isinstance(scheme, PowerOfTwo):
        out[Fraction(0)] = (0, {})
        for e in range(scheme.max_exponent + 1):
            out[Fraction(1, 2**e)] = (e + 1, {"e1": e})
    else:
        q1 = [None] + list(range(1, 2**scheme.m1))
        q2 = [None] + list(range(1, 2**scheme.m2))
        best = {}
        for e1 in q1:
            for e2 in q2:
                value = (Fraction(1, 2**e1) if e1 else 0) + (Fraction(1, 2**e2) if e2 else 0)
                value = Fraction(value)
                # canonical form: fewest nonzero terms, then keep q1 present,
                # then the largest q1
                nonzero = (e1 is not None) + (e2 is not None)
                key = (nonzero, e1 is None, e1 or 0)
                if value not in best or key < best[value][0]:
                    best[value] = (key, e1, e2)
        for value, (_, e1, e2) in best.items():
            packed = ((e1 or 0) << scheme.m2) | (e2 or 0)
            out[value] = (packed, {"e1": e1, "e2": e2})
    return out


@functools.lru_cache(maxsize=None)
def _table(scheme: QuantScheme) -> _Table:
    positive = _positive_entries(scheme)
    den = scheme.denominator
    entries = []
    for value, (packed, payload) in positive.items():
        num = value.numerator * (den // value.denominator)
        entries.append((num, packed, CodeWord(sign=1, **payload)))
        if num:
            entries.append(
                (-num, packed | _sign_bit(scheme), CodeWord(sign=-1, **payload))
            )
    entries.sort(key=lambda e: e[0])
    nums = tuple(e[0] for e in entries)
    return _Table(
        numerators=nums,
        denominator=den,
        ratios=np.array([n / den for n in nums]),
        codes=np.array([e[1] for e in entries], dtype=np.int64),
        words=tuple(e[2] for e in entries),
    )


@dataclass(frozen=True)
class LevelSet:
    scheme: QuantScheme
    alpha: float
    levels: np.ndarray = field(repr=False)

    @property
    def numerators(self) -> tuple:
        return _table(self.scheme).numerators

    @property
    def denominator(self) -> int:
        return _table(self.scheme).denominator

    @property
    def codes(self) -> np.ndarray:
        return _table(self.scheme).codes

    def __len__(self):
        return len(self.levels)

    def index_of(self, value: float) -> int:
        i = int(np.searchsorted(self.levels, value))
        if i < len(self.levels) and self.levels[i] == value:
            return i
        raise EncodingError(f"{value!r} is not a level of {self.scheme} at alpha={self.alpha}")

    def to_dict(self) -> dict:
        return {
            "scheme": scheme_to_dict(self.scheme),
            "alpha": self.alpha,
            "codes": self.codes.tolist(),
            "levels": self.levels.tolist(),
        }


def build_levels(scheme: QuantScheme, alpha: float) -> LevelSet:
    if not alpha > 0 or not np.isfinite(alpha):
        raise SchemeError(f"alpha must be positive and finite, got {alpha}")
    return LevelSet(scheme, float(alpha), float(alpha) * _table(scheme).ratios)


# --- projection ---------------------------------------------------------------


def nearest_index(w, ls: LevelSet) -> np.ndarray:
    """Index of the nearest level to ``clip(w, -alpha, alpha)``.

    Ties go to the level of smaller magnitude.
    """
    w = np.clip(np.asarray(w, dtype=np.float64), -ls.alpha, ls.alpha)
    levels = ls.levels
    hi = np.clip(np.searchsorted(levels, w), 1, len(levels) - 1)
    lo = hi - 1
    d_lo = np.abs(w - levels[lo])
    d_hi = np.abs(levels[hi] - w)
    # lo and hi never straddle zero, since zero is a level
    prefer_lo = (d_lo < d_hi) | ((d_lo == d_hi) & (levels[hi] > 0))
    return np.where(prefer_lo, lo, hi)


def project(w, ls: LevelSet):
    idx = nearest_index(w, ls)
    out = ls.levels[idx]
    return float(out) if np.ndim(out) == 0 else out


def project_tanh(w, scheme: QuantScheme, alpha: float):
    """Transform-domain quantizer using ``h(x) = tanh(x)/2 + 1/2``.

    Kept for comparison with the nearest-level projector. Results are not
    guaranteed to be members of the level set, and the power-of-2 branch
    saturates to ``+-alpha`` once ``h`` rounds up to 1. Only fixed-point and
    power-of-2 schemes are defined.
    """
    c = np.clip(np.asarray(w, dtype=np.float64) / alpha, -1.0, 1.0)
    h = np.tanh(c) / 2 + 0.5
    if isinstance(scheme, FixedPoint):
        steps = 2**scheme.bits - 1
        y = np.round(steps * h) / steps
    elif isinstance(scheme, PowerOfTwo):
        cutoff = 2.0 ** (-(2**scheme.bits) + 1)
        y = np.where(h > cutoff, 2.0 ** np.round(np.log2(np.maximum(h, cutoff))), 0.0)
    else:
        raise SchemeError("tanh transform is only defined for fixed-point and power-of-2")
    y = np.clip(y, np.tanh(-1.0) / 2 + 0.5, np.tanh(1.0) / 2 + 0.5)
    return alpha * np.arctanh(2 * y - 1)


# --- code words ---------------------------------------------------------------


def encode(level: float, ls: LevelSet) -> CodeWord:
    return _table(ls.scheme).words[ls.index_of(level)]


def decode(cw: CodeWord, ls: LevelSet) -> float:
    table = _table(ls.scheme)
    try:
        i = table.words.index(cw)
    except ValueError:
        raise EncodingError(f"{cw} is not a code word of {ls.scheme}") from None
    return float(ls.levels[i])


def packed_to_index(codes: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Map packed integer codes back to level indices; raises on unknown codes."""
    table = _table(scheme)
    order = np.argsort(table.codes)
    sorted_codes = table.codes[order]
    codes = np.asarray(codes, dtype=np.int64)
    pos = np.clip(np.searchsorted(sorted_codes, codes), 0, len(sorted_codes) - 1)
    if codes.size and not np.all(sorted_codes[pos] == codes):
        raise EncodingError(f"code word outside {scheme}")
    return order[pos]


# --- layers -------------------------------------------------------------------


@dataclass
class QuantizedLayer:
    """Packed per-weight codes for one GEMM layer plus what is needed to decode them.

    ``codes[r, c]`` is interpreted with ``sp2_scheme`` when row ``r`` is tagged
    SP2 in ``partition`` and with ``fixed_scheme`` otherwise.
    """

    codes: np.ndarray
    alpha: float
    partition: RowPartition
    fixed_scheme: QuantScheme = FixedPoint(4)
    sp2_scheme: QuantScheme = SP2(2, 1)
    act_bits: int = 4
    act_alpha: float | None = None
    name: str = "layer0"

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.ndim != 2 or self.codes.shape[0] != len(self.partition):
            raise ShapeError("codes and partition disagree on row count")

    @property
    def shape(self):
        return self.codes.shape

    def level_sets(self) -> tuple[LevelSet, LevelSet]:
        return build_levels(self.fixed_scheme, self.alpha), build_levels(self.sp2_scheme, self.alpha)

    def values(self) -> np.ndarray:
        fixed_ls, sp2_ls = self.level_sets()
        out = np.empty(self.codes.shape)
        sp2 = self.partition.is_sp2
        out[~sp2] = fixed_ls.levels[packed_to_index(self.codes[~sp2], self.fixed_scheme)]
        out[sp2] = sp2_ls.levels[packed_to_index(self.codes[sp2], self.sp2_scheme)]
        return out

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "alpha": self.alpha,
            "fixed_scheme": scheme_to_dict(self.fixed_scheme),
            "sp2_scheme": scheme_to_dict(self.sp2_scheme),
            "act_bits": self.act_bits,
            "act_alpha": self.act_alpha,
            "partition": self.partition.to_dict(self.name),
            "codes": self.codes.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantizedLayer":
        codes = np.array(d["codes"], dtype=np.int64)
        if codes.ndim == 1:
            codes = codes.reshape(len(d["partition"]["assignments"]), -1)
        layer = cls(
            codes=codes,
            alpha=float(d["alpha"]),
            partition=RowPartition.from_dict(d["partition"]),
            fixed_scheme=scheme_from_dict(d["fixed_scheme"]),
            sp2_scheme=scheme_from_dict(d["sp2_scheme"]),
            act_bits=int(d.get("act_bits", 4)),
            act_alpha=d.get("act_alpha"),
            name=d.get("name", "layer0"),
        )
        layer.values()  # validates every code against its row scheme
        return layer

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _row_schemes(rows: int, scheme) -> list:
    if isinstance(scheme, (FixedPoint, PowerOfTwo, SP2)):
        return [scheme] * rows
    schemes = list(scheme)
    if len(schemes) != rows:
        raise ShapeError(f"{len(schemes)} row schemes for {rows} rows")
    return schemes


def project_rows(w, schemes, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Project each row with its own scheme. Returns (values, packed codes)."""
    w = as_matrix(w)
    schemes = _row_schemes(w.shape[0], schemes)
    values = np.empty_like(w)
    codes = np.empty(w.shape, dtype=np.int64)
    for scheme in set(schemes):
        rows = np.array([s == scheme for s in schemes])
        ls = build_levels(scheme, alpha)
        idx = nearest_index(w[rows], ls)
        values[rows] = ls.levels[idx]
        codes[rows] = ls.codes[idx]
    return values, codes


def project_matrix(
    w,
    partition: RowPartition,
    alpha: float,
    fixed_scheme: QuantScheme = FixedPoint(4),
    sp2_scheme: QuantScheme = SP2(2, 1),
    act_bits: int = 4,
    name: str = "layer0",
) -> tuple[np.ndarray, QuantizedLayer]:
    w = as_matrix(w)
    if len(partition) != w.shape[0]:
        raise ShapeError(f"partition has {len(partition)} rows, matrix has {w.shape[0]}")
    values, codes = project_rows(w, partition.row_schemes(fixed_scheme, sp2_scheme), alpha)
    layer = QuantizedLayer(
        codes=codes,
        alpha=float(alpha),
        partition=partition,
        fixed_scheme=fixed_scheme,
        sp2_scheme=sp2_scheme,
        act_bits=act_bits,
        name=name,
    )
    return values, layer


ALPHA_GRID = np.linspace(0.3, 1.0, 64)


def choose_alpha(w, scheme: QuantScheme | Sequence[QuantScheme]) -> float:
    """Per-layer scale minimizing mean squared projection error.

    Searches 64 evenly spaced candidates in ``[0.3, 1.0] * max|w|``; ties pick
    the smaller scale. ``scheme`` may be one scheme or one scheme per row.
    An all-zero matrix returns 1.0.
    """
    w = as_matrix(w)
    if w.size == 0:
        raise ShapeError("empty matrix")
    top = float(np.max(np.abs(w)))
    if top == 0.0:
        return 1.0
    schemes = _row_schemes(w.shape[0], scheme)
    best_alpha, best_err = None, np.inf
    for alpha in ALPHA_GRID * top:
        values, _ = project_rows(w, schemes, alpha)
        err = float(np.mean((values - w) ** 2))
        if err < best_err:
            best_alpha, best_err = float(alpha), err
    return best_alpha


# --- activations ----------------------------------------------------------------


@dataclass(frozen=True)
class ActQuant:
    """Unsigned ``bits``-wide activation quantizer clipping at ``alpha``."""

    bits: int
    alpha: float

    def __post_init__(self):
        if self.bits < 2:
            raise SchemeError(f"activation bits must be >= 2, got {self.bits}")
        if not self.alpha > 0:
            raise SchemeError(f"activation clip must be positive, got {self.alpha}")

    @property
    def scale(self) -> float:
        return self.alpha / (2**self.bits - 1)


def quantize_activations(a, aq: ActQuant) -> tuple[np.ndarray, float]:
    """Integer codes in ``[0, 2**bits - 1]`` and the dequantization scale."""
    a = np.asarray(a, dtype=np.float64)
    top = 2**aq.bits - 1
    x = np.clip(a, 0.0, aq.alpha) / aq.alpha * top
    # half away from zero; x is non-negative here
    codes = np.floor(x + 0.5).astype(np.int64)
    return np.minimum(codes, top), aq.scale
