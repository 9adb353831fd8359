"""Integer emulation of the two GEMM cores.

The fixed-point core multiplies activation codes by signed weight magnitudes
(the DSP path). The SP2 core never multiplies: each weight contributes
``(a << s1) + (a << s2)`` with shifts taken from its code word (the LUT path).

All integer outputs carry an implicit denominator, see ``output_denominator``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .quantizers import (
    CodeWord,
    QuantizedLayer,
    QuantScheme,
    _table,
    packed_to_index,
)
from .tensor import ShapeError


@dataclass(frozen=True)
class GemmTile:
    bat: int
    blk_in: int
    blk_out_fixed: int
    blk_out_sp2: int

    def __post_init__(self):
        if self.bat < 1 or self.blk_in < 1:
            raise ValueError("bat and blk_in must be >= 1")
        if self.blk_out_fixed < 0 or self.blk_out_sp2 < 0:
            raise ValueError("output blocks must be >= 0")


@dataclass(frozen=True)
class FilterIndexMap:
    fixed: tuple
    sp2: tuple

    def __post_init__(self):
        rows = sorted(self.fixed + self.sp2)
        if rows != list(range(len(rows))):
            raise ValueError("filter index lists must partition the output rows")


@dataclass
class GemmStats:
    macs_fixed: int = 0
    macs_sp2: int = 0
    idle_slots: int = 0  # PE slots left empty by ragged tiles
    stall_slots: int = 0  # PE slots of a core waiting for the other core to finish
    cycles_ideal: int = 0

    @property
    def total_macs(self) -> int:
        return self.macs_fixed + self.macs_sp2

    @property
    def utilization(self) -> float:
        slots = self.total_macs + self.idle_slots
        return self.total_macs / slots if slots else 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def sp2_mac(a: int, cw: CodeWord, d: int) -> int:
    """Shift-add product of activation code ``a`` with an SP2 (or power-of-2) word.

    Returns ``a * level * 2**d`` exactly, where ``level`` is the unit magnitude
    encoded by ``cw`` and ``d`` the scheme's largest exponent.
    """
    acc = 0
    for e in (cw.e1, cw.e2):
        if e is not None:
            acc += a << (d - e)
    return cw.sign * acc


def fixed_mac(a: int, cw: CodeWord) -> int:
    """Product of ``a`` and a fixed-point magnitude, expanded into shifted adds."""
    mag = cw.magnitude or 0
    acc = 0
    for bit in range(mag.bit_length()):
        if (mag >> bit) & 1:
            acc += a << bit
    assert acc == a * mag
    return cw.sign * acc


def _shift_tables(scheme: QuantScheme):
    """Per-level arrays (sign, shift1, use1, shift2, use2) for shift-based schemes."""
    table = _table(scheme)
    d = scheme.max_exponent
    sign, s1, u1, s2, u2 = [], [], [], [], []
    for cw in table.words:
        sign.append(cw.sign)
        s1.append(d - cw.e1 if cw.e1 is not None else 0)
        u1.append(cw.e1 is not None)
        s2.append(d - cw.e2 if cw.e2 is not None else 0)
        u2.append(cw.e2 is not None)
    return tuple(np.array(x, dtype=np.int64) for x in (sign, s1, u1, s2, u2))


def output_denominator(layer: QuantizedLayer) -> int:
    """Common denominator of the integer outputs of ``hetero_gemm``.

    Fixed-point rows natively carry ``2**(m-1) - 1`` and shift rows ``2**d``;
    a layer using both is brought to their least common multiple.
    """
    dens = set()
    if layer.partition.fixed_rows.size:
        dens.add(layer.fixed_scheme.denominator)
    if layer.partition.sp2_rows.size:
        dens.add(layer.sp2_scheme.denominator)
    return math.lcm(*dens) if dens else 1


def _check_width(acts_max: int, cols: int, numerator_max: int) -> None:
    bound = acts_max * max(numerator_max, 1) * max(cols, 1)
    if bound.bit_length() > 62:
        raise OverflowError(f"accumulator may need {bound.bit_length() + 1} bits")


def _fixed_core(acts, mags, tile: GemmTile, stats: GemmStats) -> tuple[np.ndarray, int]:
    batch, cols = acts.shape
    rows = mags.shape[0]
    out = np.zeros((batch, rows), dtype=np.int64)
    if rows == 0:
        return out, 0
    pe = tile.bat * tile.blk_in * tile.blk_out_fixed
    steps = 0
    for b0 in range(0, batch, tile.bat):
        for o0 in range(0, rows, tile.blk_out_fixed):
            for k0 in range(0, cols, tile.blk_in):
                a = acts[b0 : b0 + tile.bat, k0 : k0 + tile.blk_in]
                w = mags[o0 : o0 + tile.blk_out_fixed, k0 : k0 + tile.blk_in]
                out[b0 : b0 + tile.bat, o0 : o0 + tile.blk_out_fixed] += a @ w.T
                useful = a.shape[0] * a.shape[1] * w.shape[0]
                stats.macs_fixed += useful
                stats.idle_slots += pe - useful
                steps += 1
    return out, steps


def _sp2_core(acts, tables, tile: GemmTile, stats: GemmStats) -> tuple[np.ndarray, int]:
    sign, s1, u1, s2, u2 = tables
    batch, cols = acts.shape
    rows = sign.shape[0]
    out = np.zeros((batch, rows), dtype=np.int64)
    if rows == 0:
        return out, 0
    pe = tile.bat * tile.blk_in * tile.blk_out_sp2
    steps = 0
    for b0 in range(0, batch, tile.bat):
        for o0 in range(0, rows, tile.blk_out_sp2):
            osl = slice(o0, o0 + tile.blk_out_sp2)
            for k0 in range(0, cols, tile.blk_in):
                ksl = slice(k0, k0 + tile.blk_in)
                a = acts[b0 : b0 + tile.bat, ksl][:, None, :]
                t1 = np.left_shift(a, s1[osl, ksl][None]) * u1[osl, ksl][None]
                t2 = np.left_shift(a, s2[osl, ksl][None]) * u2[osl, ksl][None]
                out[b0 : b0 + tile.bat, osl] += ((t1 + t2) * sign[osl, ksl][None]).sum(axis=2)
                useful = a.shape[0] * a.shape[2] * t1.shape[1]
                stats.macs_sp2 += useful
                stats.idle_slots += pe - useful
                steps += 1
    return out, steps


def hetero_gemm(acts, layer: QuantizedLayer, tile: GemmTile):
    """Run one layer on the two cores; returns ``(outputs, index_map, stats)``.

    ``acts`` holds unsigned activation codes, shape ``(batch, cols)``. Outputs
    have shape ``(batch, rows)`` in the layer's original row order and share
    the denominator given by ``output_denominator(layer)``.
    """
    acts = np.asarray(acts)
    if acts.ndim != 2 or acts.shape[1] != layer.shape[1]:
        raise ShapeError(f"activations {acts.shape} do not match layer {layer.shape}")
    if not np.issubdtype(acts.dtype, np.integer):
        raise TypeError("activation codes must be integers")
    acts = acts.astype(np.int64)
    top = 2**layer.act_bits - 1
    if acts.size and (acts.min() < 0 or acts.max() > top):
        raise ValueError(f"activation codes must lie in [0, {top}]")

    part = layer.partition
    fixed_rows, sp2_rows = part.fixed_rows, part.sp2_rows
    if fixed_rows.size and tile.blk_out_fixed == 0:
        raise ValueError("layer has fixed-point rows but the fixed core has no PEs")
    if sp2_rows.size and tile.blk_out_sp2 == 0:
        raise ValueError("layer has SP2 rows but the SP2 core has no PEs")

    den = output_denominator(layer)
    stats = GemmStats()
    batch, cols = acts.shape

    fixed_idx = packed_to_index(layer.codes[fixed_rows], layer.fixed_scheme)
    fixed_nums = np.array(_table(layer.fixed_scheme).numerators, dtype=np.int64)
    mags = fixed_nums[fixed_idx] if fixed_rows.size else np.zeros((0, cols), np.int64)

    sp2_idx = packed_to_index(layer.codes[sp2_rows], layer.sp2_scheme)
    tables = tuple(t[sp2_idx] if sp2_rows.size else np.zeros((0, cols), np.int64)
                   for t in _shift_tables(layer.sp2_scheme))

    _check_width(top, cols, den)
    fixed_out, fixed_steps = _fixed_core(acts, mags, tile, stats)
    sp2_out, sp2_steps = _sp2_core(acts, tables, tile, stats)

    stats.cycles_ideal = max(fixed_steps, sp2_steps)
    stats.stall_slots = (
        (stats.cycles_ideal - fixed_steps) * tile.bat * tile.blk_in * tile.blk_out_fixed
        + (stats.cycles_ideal - sp2_steps) * tile.bat * tile.blk_in * tile.blk_out_sp2
    )

    # Store unit: scatter both cores' results to their global rows
    out = np.zeros((batch, len(part)), dtype=np.int64)
    if fixed_rows.size:
        out[:, fixed_rows] = fixed_out * (den // layer.fixed_scheme.denominator)
    if sp2_rows.size:
        out[:, sp2_rows] = sp2_out * (den // layer.sp2_scheme.denominator)
    index_map = FilterIndexMap(tuple(fixed_rows.tolist()), tuple(sp2_rows.tolist()))
    return out, index_map, stats


def dequantize_output(out, layer: QuantizedLayer, act_scale: float) -> np.ndarray:
    """Real-valued outputs: ``out * alpha * act_scale / denominator``."""
    return np.asarray(out, dtype=np.float64) * (layer.alpha * act_scale / output_denominator(layer))
