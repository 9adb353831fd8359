from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from msq.kernel import (
    FilterIndexMap,
    GemmTile,
    dequantize_output,
    fixed_mac,
    hetero_gemm,
    output_denominator,
    sp2_mac,
)
from msq.partition import RowPartition, partition_layer
from msq.quantizers import (
    SP2,
    ActQuant,
    CodeWord,
    FixedPoint,
    PowerOfTwo,
    build_levels,
    choose_alpha,
    decode,
    encode,
    project_matrix,
    quantize_activations,
)
from msq.quantizers import _table
from msq.tensor import Rng, ShapeError, matmul


def word_value(cw):
    """Exact unit magnitude of a shift code word, from its exponents alone."""
    terms = [Fraction(1, 2**e) for e in (cw.e1, cw.e2) if e is not None]
    return cw.sign * sum(terms, Fraction(0))


def test_sp2_mac_examples():
    ls = build_levels(SP2(2, 1), 1.0)
    assert sp2_mac(5, encode(0.625, ls), 3) == 25
    assert sp2_mac(1, encode(1.0, ls), 3) == 8
    assert sp2_mac(9, encode(-0.625, ls), 3) == -45
    assert sp2_mac(13, CodeWord(1), 3) == 0


def test_fixed_mac_examples():
    assert fixed_mac(7, CodeWord(1, magnitude=5)) == 35
    assert fixed_mac(7, CodeWord(-1, magnitude=5)) == -35
    assert fixed_mac(11, CodeWord(1, magnitude=0)) == 0


def test_fixed_mac_exhaustive_4bit():
    for a, mag, sign in product(range(16), range(8), (1, -1)):
        assert fixed_mac(a, CodeWord(sign, magnitude=mag)) == sign * a * mag


@pytest.mark.parametrize("scheme", [SP2(1, 1), SP2(2, 1), SP2(2, 2), SP2(3, 1), PowerOfTwo(4)])
def test_shift_mac_exhaustive(scheme):
    d = scheme.max_exponent
    ls = build_levels(scheme, 1.0)
    for cw in _table(scheme).words:
        level = word_value(cw)
        assert Fraction(decode(cw, ls)) == level
        for a in range(256):
            assert sp2_mac(a, cw, d) == a * level * 2**d


def mixed_layer(rows, cols, pr, seed, fixed=FixedPoint(4), sp2=SP2(2, 1)):
    rng = Rng(seed)
    w = rng.normal(size=(rows, cols)) * rng.uniform(0.2, 2.0, size=(rows, 1))
    part = partition_layer(w, pr)
    alpha = choose_alpha(w, part.row_schemes(fixed, sp2))
    return project_matrix(w, part, alpha, fixed, sp2)


def test_all_fixed_is_integer_gemm():
    rng = Rng(1)
    w = rng.normal(size=(10, 12))
    wq, layer = project_matrix(w, RowPartition.uniform(10), 1.5)
    acts = rng.integers(0, 16, size=(7, 12))
    mags = np.rint(wq / 1.5 * 7).astype(np.int64)
    out, imap, stats = hetero_gemm(acts, layer, GemmTile(2, 5, 3, 0))
    expected = [[sum(int(acts[b, k]) * int(mags[r, k]) for k in range(12)) for r in range(10)]
                for b in range(7)]
    assert out.tolist() == expected
    assert imap.fixed == tuple(range(10)) and imap.sp2 == ()
    assert stats.macs_sp2 == 0 and stats.macs_fixed == 7 * 10 * 12


def test_mixed_matches_float_reference():
    wq, layer = mixed_layer(20, 17, 2 / 3, seed=2)
    aq = ActQuant(4, 2.0)
    x = Rng(3).uniform(-0.5, 2.5, size=(6, 17))
    codes, scale = quantize_activations(x, aq)
    out, _, _ = hetero_gemm(codes, layer, GemmTile(1, 16, 16, 24))
    real = dequantize_output(out, layer, scale)
    ref = matmul(codes * scale, wq.T)
    np.testing.assert_allclose(real, ref, rtol=1e-6, atol=1e-12)


def test_output_denominator():
    _, mixed = mixed_layer(6, 4, 0.5, seed=4)
    assert output_denominator(mixed) == 7 * 8
    _, fixed_only = mixed_layer(6, 4, 0.0, seed=4)
    assert output_denominator(fixed_only) == 7
    _, sp2_only = mixed_layer(6, 4, 1.0, seed=4)
    assert output_denominator(sp2_only) == 8


def test_tiling_invariance():
    _, layer = mixed_layer(24, 30, 0.6, seed=5)
    acts = Rng(6).integers(0, 16, size=(9, 30))
    ref, _, _ = hetero_gemm(acts, layer, GemmTile(1, 1, 1, 1))
    for tile in [GemmTile(9, 30, 24, 24), GemmTile(4, 7, 5, 3), GemmTile(2, 16, 16, 32)]:
        out, _, stats = hetero_gemm(acts, layer, tile)
        assert np.array_equal(out, ref)
        assert stats.total_macs == 9 * 24 * 30


def test_row_order_invariance_on_shared_levels():
    # fixed{4} levels are k/7, so only 0 and +-1 are shared with SP2{2,1}
    rng = Rng(7)
    w = np.array([-1.0, 0.0, 1.0])[rng.integers(0, 3, size=(8, 11))]
    acts = rng.integers(0, 16, size=(5, 11))
    outs = []
    for mask in ([True] * 4 + [False] * 4, [False, True] * 4, [False] * 8, [True] * 8):
        part = RowPartition(np.array(mask), float("nan"), sum(mask) / 8)
        wq, layer = project_matrix(w, part, 1.0)
        assert np.array_equal(wq, w)
        out, imap, _ = hetero_gemm(acts, layer, GemmTile(2, 4, 3, 3))
        assert sorted(imap.fixed + imap.sp2) == list(range(8))
        outs.append(dequantize_output(out, layer, 1.0))
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])
    assert np.array_equal(outs[0], acts @ w.T)


def test_half_routes_between_shift_cores():
    # +-1/2 is not a fixed{4} level; route it between a P2 core and an SP2 core instead
    w = np.array([[0.5, -0.5, 1.0, 0.0], [-1.0, 0.5, 0.0, 0.5]])
    acts = np.array([[3, 1, 4, 1], [5, 9, 2, 6]])
    outs = []
    for mask in ([True, False], [False, True]):
        part = RowPartition(np.array(mask), float("nan"), 0.5)
        wq, layer = project_matrix(w, part, 1.0, fixed_scheme=PowerOfTwo(4), sp2_scheme=SP2(2, 1))
        assert np.array_equal(wq, w)
        out, _, _ = hetero_gemm(acts, layer, GemmTile(1, 2, 1, 1))
        outs.append(dequantize_output(out, layer, 1.0))
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], acts @ w.T)


def test_idle_slots_ragged_tiles():
    _, layer = mixed_layer(16, 3, 0.0, seed=8)
    acts = Rng(9).integers(0, 16, size=(1, 3))
    _, _, stats = hetero_gemm(acts, layer, GemmTile(1, 16, 16, 16))
    assert stats.macs_fixed == 48 and stats.idle_slots == 256 - 48
    assert stats.utilization == pytest.approx(3 / 16)


def test_no_idle_slots_when_dims_divide():
    _, layer = mixed_layer(32, 32, 0.5, seed=10)
    acts = Rng(11).integers(0, 16, size=(4, 32))
    _, _, stats = hetero_gemm(acts, layer, GemmTile(2, 16, 8, 8))
    assert stats.idle_slots == 0 and stats.utilization == 1.0
    assert stats.stall_slots == 0


def test_stall_slots_when_cores_unbalanced():
    _, layer = mixed_layer(32, 16, 0.25, seed=12)  # 8 SP2 rows, 24 fixed
    acts = Rng(13).integers(0, 16, size=(1, 16))
    _, _, stats = hetero_gemm(acts, layer, GemmTile(1, 16, 8, 8))
    assert stats.cycles_ideal == 3
    assert stats.stall_slots == 2 * 16 * 8


def test_dequantize_examples():
    _, layer = mixed_layer(2, 4, 1.0, seed=14)
    layer.alpha = 1.0
    assert dequantize_output(np.array([[25]]), layer, 1 / 15)[0, 0] == pytest.approx(25 / (8 * 15))
    assert not dequantize_output(np.zeros((3, 2), np.int64), layer, 0.1).any()


def test_filter_index_map_validates():
    FilterIndexMap((0, 2), (1,))
    with pytest.raises(ValueError):
        FilterIndexMap((0, 1), (1,))
    with pytest.raises(ValueError):
        FilterIndexMap((0,), (2,))


def test_errors():
    _, layer = mixed_layer(6, 5, 0.5, seed=15)
    good = np.zeros((2, 5), dtype=np.int64)
    with pytest.raises(ShapeError):
        hetero_gemm(np.zeros((2, 4), np.int64), layer, GemmTile(1, 1, 1, 1))
    with pytest.raises(TypeError):
        hetero_gemm(good.astype(float), layer, GemmTile(1, 1, 1, 1))
    with pytest.raises(ValueError):
        hetero_gemm(good + 16, layer, GemmTile(1, 1, 1, 1))
    with pytest.raises(ValueError):
        hetero_gemm(good, layer, GemmTile(1, 1, 1, 0))
    with pytest.raises(ValueError):
        GemmTile(0, 1, 1, 1)


def test_overflow_is_reported():
    w = Rng(16).normal(size=(2, 4))
    _, layer = project_matrix(w, RowPartition.uniform(2, sp2=True), 1.0, sp2_scheme=SP2(6, 1))
    layer.act_bits = 8
    with pytest.raises(OverflowError):
        hetero_gemm(np.full((1, 4), 255), layer, GemmTile(1, 4, 1, 1))
