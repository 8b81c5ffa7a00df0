"""Property-based checks of the invariants each module promises."""

import math

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvcompact.attention import SignificanceStats, aggregate_gqa, critical_token_count, update_significance_generation
from kvcompact.engine import Segment, attend, split_attention
from kvcompact.layout import LayoutParams, pack_keys, pack_values, unpack_keys, unpack_values
from kvcompact.memstore import BidirPageTableEntry, HeadPlan, PageGeometry, PagedKVStore, prefix_sum_exclusive
from kvcompact.policy import PolicyParams, TokenClass, classify_prompt, select_victim
from kvcompact.quant import dequantize, downgrade, pack_codes, quantize, unpack_codes

from harness import partition_ok

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)
vectors = hnp.arrays(np.float64, st.integers(1, 64), elements=finite)
BITS = st.sampled_from([1, 2, 4, 8])
FAST = settings(max_examples=60, deadline=None)


@FAST
@given(x=vectors, bits=BITS)
def test_quantization_error_bound(x, bits):
    q = quantize(x, bits)
    xh = dequantize(q)
    ulp = np.spacing(np.maximum(np.abs(x), np.abs(xh)))
    assert np.all(np.abs(x - xh) <= q.scale / 2 + 4 * ulp)
    assert q.codes.min() >= 0 and q.codes.max() <= 2 ** bits - 1


@FAST
@given(x=vectors, hi=st.sampled_from([2, 4, 8]), lo=st.sampled_from([1, 2, 4]))
def test_downgrade_is_requantized_reconstruction(x, hi, lo):
    assume(lo < hi)
    q = quantize(x, hi)
    assert downgrade(q, lo) == quantize(dequantize(q), lo)


@FAST
@given(codes=st.lists(st.integers(0, 255), min_size=1, max_size=100), bits=st.sampled_from([1, 2, 4, 8]))
def test_code_packing_round_trip(codes, bits):
    c = np.array(codes) % (2 ** bits)
    packed = pack_codes(c, bits)
    assert len(packed) == math.ceil(c.size * bits / 8)
    assert np.array_equal(unpack_codes(packed, bits, c.size), c)


@st.composite
def layouts(draw):
    k_vec, k_group, v_vec, v_group = (draw(st.sampled_from([1, 2, 4])) for _ in range(4))
    f = int(np.lcm(k_vec * k_group, v_group)) * draw(st.integers(1, 3))
    return LayoutParams(f, draw(st.integers(1, 9)), k_vec, k_group, v_vec, v_group)


@FAST
@given(p=layouts(), seed=st.integers(0, 2 ** 16))
def test_layout_round_trip(p, seed):
    x = np.random.default_rng(seed).integers(0, 2 ** 16, size=(p.n_tokens, p.features)).astype(np.uint16)
    assert np.array_equal(unpack_keys(pack_keys(x, p), p), x)
    assert np.array_equal(unpack_values(pack_values(x, p), p), x)
    assert sorted(pack_keys(x, p).tolist()) == sorted(x.ravel().tolist())


@FAST
@given(d=st.lists(st.integers(0, 1000), max_size=200), workers=st.integers(1, 6))
def test_prefix_sum(d, workers):
    out = prefix_sum_exclusive(d, workers)
    assert out.tolist() == [sum(d[:k]) for k in range(len(d))]


@FAST
@given(sig=st.lists(st.one_of(st.floats(0, 1), st.just(float("nan"))), min_size=1, max_size=30), data=st.data())
def test_victim_is_minimal_and_oldest(sig, data):
    pos = data.draw(st.permutations(range(100)))[: len(sig)]
    v = select_victim(pos, sig)
    key = {p: (math.inf if math.isnan(s) else s, p) for p, s in zip(pos, sig)}
    assert key[v] == min(key.values())


@FAST
@given(sig=hnp.arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1)),
       ah=st.floats(0, 5), al1=st.floats(0, 0.2), al2=st.floats(0, 0.2), window=st.integers(1, 8))
def test_raising_alpha_l_never_revives(sig, ah, al1, al2, window):
    lo, hi = sorted((al1, al2))
    assume(hi <= ah)
    n = sig.size
    a = classify_prompt(sig, n, PolicyParams(alpha_h=ah, alpha_l=lo, window=window))
    b = classify_prompt(sig, n, PolicyParams(alpha_h=ah, alpha_l=hi, window=window))
    for x, y in zip(a, b):
        if x is TokenClass.PRUNED:
            assert y is TokenClass.PRUNED
    assert a[-min(window, n):] == [TokenClass.HIGH] * min(window, n)


@FAST
@given(mass=hnp.arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 1)),
       target=st.floats(0.01, 1.0))
def test_critical_count_is_minimal(mass, target):
    assume(mass.sum() > 0)
    k = critical_token_count(mass, target)
    top = np.sort(mass)[::-1]
    assert 1 <= k <= mass.size
    if k > 1:
        assert math.fsum(top[: k - 1]) < target * mass.sum() * (1 + 1e-9)


@FAST
@given(mats=st.integers(1, 5).flatmap(
    lambda g: st.lists(hnp.arrays(np.float64, (4, 4), elements=st.floats(0, 1)), min_size=g, max_size=g)))
def test_gqa_max_dominates(mats):
    agg = aggregate_gqa(mats)
    for m in mats:
        assert np.all(agg >= m)
    assert any(np.array_equal(agg[i, j], m[i, j]) for m in mats for i in range(4) for j in range(4))


@FAST
@given(rows=st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=10), min_size=1, max_size=20))
def test_running_average(rows):
    st_ = SignificanceStats()
    st_.track(0)
    hist = []
    for row in rows:
        update_significance_generation(st_, [row[0]], [0])
        hist.append(row[0])
    assert math.isclose(st_.significance([0])[0], math.fsum(hist) / len(hist), rel_tol=1e-12, abs_tol=1e-15)


@FAST
@given(seed=st.integers(0, 2 ** 16), n=st.integers(1, 40), cuts=st.lists(st.integers(0, 40), max_size=5))
def test_split_equals_unsplit(seed, n, cuts):
    rng = np.random.default_rng(seed)
    k, v = rng.standard_normal((2, n, 8)) * 3
    q = rng.standard_normal((2, 8))
    pos = rng.permutation(n)
    bounds = sorted({0, n, *(c % (n + 1) for c in cuts)})
    segs = [Segment(pos[a:b], k[a:b], v[a:b]) for a, b in zip(bounds, bounds[1:])]
    ref = attend(q, [Segment(pos, k, v)]).output
    got = split_attention(q, segs)
    assert np.max(np.abs(got - ref)) <= 1e-9 * np.max(np.abs(ref))


@settings(max_examples=30, deadline=None)
@given(ops=st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2), st.integers(0, 2), st.floats(0, 1)),
                    min_size=1, max_size=40))
def test_store_partition_under_random_plans(ops):
    store = PagedKVStore(40, PageGeometry(page_bytes=64, head_dim=8), table_len=40)
    held = {}
    for head, nh, nl, frac in ops:
        key = ("r", head)
        mine = held.get(key, [])
        freed = mine[: int(len(mine) * frac)]
        nh = min(nh, store.free_count)
        nl = min(nl, store.free_count - nh)
        g = store.compact([HeadPlan("r", head, nh, nl, freed)])[key]
        held[key] = mine[len(freed):] + g.high + g.low
        assert partition_ok(store)
    store.audit()


@FAST
@given(seq=st.lists(st.sampled_from([TokenClass.HIGH, TokenClass.LOW]), max_size=12), length=st.integers(1, 12))
def test_table_sides_never_mix(seq, length):
    e = BidirPageTableEntry(length)
    for i, cls in enumerate(seq[:length]):
        e.append(i, cls)
    want_high = [i for i, c in enumerate(seq[:length]) if c is TokenClass.HIGH]
    want_low = [i for i, c in enumerate(seq[:length]) if c is TokenClass.LOW]
    assert (e.high_pages(), e.low_pages()) == (want_high, want_low)
    assert e.left_count + e.right_count <= length
