import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvaformer import autodiff as ad
from mvaformer.errors import ContractError, ShapeError
from mvaformer.nn import (ATTENTION_HEADER, AttentionRecord, FeedForward, Linear, MaskKind,
                          MultiHeadAttention, build_attention_mask, multi_head_attention,
                          read_attention_csv, token_coords, write_attention_csv)

from conftest import t64

X = ad.MASKED_F64


def set_linear(lin, weight, bias=None):
    lin.weight.data = np.asarray(weight, dtype=np.float64)
    lin.bias.data = np.zeros(lin.weight.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)


def mha64(width, heads, seed=0):
    return MultiHeadAttention(width, heads, np.random.default_rng(seed), np.float64)


# -- masks ------------------------------------------------------------------------
def test_mask_examples():
    sva = build_attention_mask("sva", 2, 1, np.float64).matrix
    dva = build_attention_mask("dva", 2, 1, np.float64).matrix
    assert np.array_equal(sva, [[0, X], [X, 0]])
    assert np.array_equal(dva, [[X, 0], [0, X]])


def test_mask_counts_for_four_views():
    sva = build_attention_mask(MaskKind.SVA, 4, 49).visible.sum()
    dva = build_attention_mask(MaskKind.DVA, 4, 49).visible.sum()
    assert (sva, dva, sva + dva) == (9604, 28812, 196 ** 2)


@given(st.integers(1, 5), st.integers(1, 9))
def test_masks_partition_full(m, t):
    full = build_attention_mask(MaskKind.FULL, m, t).visible
    sva = build_attention_mask(MaskKind.SVA, m, t).visible
    dva = build_attention_mask(MaskKind.DVA, m, t).visible
    assert full.all()
    assert np.array_equal(sva | dva, full)
    assert not (sva & dva).any()
    assert sva.sum() == m * t * t and dva.sum() == m * (m - 1) * t * t
    view = np.arange(m * t) // t
    assert np.array_equal(sva, view[:, None] == view[None, :])


def test_mask_rejects_empty_dims():
    with pytest.raises(ContractError):
        build_attention_mask(MaskKind.SVA, 0, 3)


# -- attention --------------------------------------------------------------------
def test_single_token_attention_is_projected_value(rng):
    att = mha64(4, 2)
    x = t64(rng.standard_normal((1, 4)))
    out, _ = multi_head_attention(x, x, build_attention_mask("full", 1, 1, np.float64), att)
    expected = att.o(att.v(x)).data
    assert np.allclose(out.data, expected, atol=1e-12)


def test_two_token_hand_example():
    att = mha64(2, 1)
    for lin in (att.q, att.k, att.v, att.o):
        set_linear(lin, np.eye(2))
    x = t64(np.eye(2))
    out, recs = multi_head_attention(x, x, build_attention_mask("full", 2, 1, np.float64), att, record=True)
    # softmax([1/sqrt2, 0]) computed by hand
    hi, lo = 0.6697615493266569, 0.3302384506733431
    assert np.allclose(out.data, [[hi, lo], [lo, hi]], atol=1e-6)
    assert np.allclose(recs[0].weights, [[hi, lo], [lo, hi]], atol=1e-6)


def test_full_mask_equals_no_mask(rng):
    att = mha64(8, 4)
    x = t64(rng.standard_normal((2, 6, 8)))
    with_mask, _, _ = att(x, x, build_attention_mask("full", 3, 2, np.float64))
    without, _, _ = att(x, x, None)
    assert np.array_equal(with_mask.data, without.data)


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["full", "sva", "dva"]),
       st.permutations([0, 1, 2]))
def test_view_permutation_equivariance(seed, kind, perm):
    r = np.random.default_rng(seed)
    att = mha64(4, 2, seed % 7)
    m, t = 3, 2
    x = r.standard_normal((1, m * t, 4))
    mask = build_attention_mask(kind, m, t, np.float64)
    order = np.concatenate([np.arange(v * t, (v + 1) * t) for v in perm])
    out, _, _ = att(t64(x), None, mask)
    out_p, _, _ = att(t64(x[:, order]), None, mask)
    assert np.allclose(out_p.data, out.data[:, order], atol=1e-12)


@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from(["sva", "dva"]), st.integers(0, 999))
def test_record_invariants(m, t, kind, seed):
    r = np.random.default_rng(seed)
    att = mha64(4, 2, seed)
    mask = build_attention_mask(kind, m, t, np.float64)
    _, w, empty = att(t64(r.standard_normal((1, m * t, 4))), None, mask, record=True)
    assert np.all(w[:, :, ~mask.visible] == 0.0)
    sums = w.sum(axis=-1)
    assert np.allclose(sums[:, :, ~empty[0]], 1.0, atol=1e-5)
    assert np.all(sums[:, :, empty[0]] == 0.0)
    if kind == "dva" and m == 1:
        assert empty.all()


def test_all_masked_query_gives_zero_output(rng):
    att = mha64(4, 2)
    out, _, empty = att(t64(rng.standard_normal((1, 3, 4))), None, build_attention_mask("dva", 1, 3, np.float64))
    assert empty.all() and np.array_equal(out.data, np.zeros((1, 3, 4)))


def test_attention_shape_errors(rng):
    att = mha64(4, 2)
    with pytest.raises(ShapeError):
        att(t64(np.zeros((1, 3, 4))), None, build_attention_mask("sva", 2, 1, np.float64))
    with pytest.raises(ShapeError):
        att(t64(np.zeros((3, 4))))
    with pytest.raises(ContractError):
        MultiHeadAttention(6, 4, rng)


def test_attention_grad_check(rng):
    att = mha64(4, 2)
    mask = build_attention_mask("sva", 2, 2, np.float64)
    x = t64(rng.standard_normal((1, 4, 4)))
    assert ad.grad_check(lambda x, w: att(x @ w, None, mask)[0], [x, att.q.weight]) < 1e-5


# -- feed-forward -----------------------------------------------------------------
def test_ffn_zero_weights_give_zero(rng):
    ffn = FeedForward(3, rng, dtype=np.float64)
    for lin in (ffn.fc1, ffn.fc2):
        set_linear(lin, np.zeros(lin.weight.shape))
    assert np.array_equal(ffn(t64(rng.standard_normal((5, 3)))).data, np.zeros((5, 3)))


def test_ffn_identity_like_hand_case(rng):
    ffn = FeedForward(2, rng, dtype=np.float64)
    set_linear(ffn.fc1, np.eye(2, 8))
    set_linear(ffn.fc2, np.eye(8, 2))
    out = ffn(t64([[1.0, -1.0]])).data
    assert np.allclose(out, [[0.8413447460685429, -0.15865525393145707]], atol=1e-12)


def test_ffn_grad_check(rng):
    ffn = FeedForward(3, rng, dtype=np.float64)
    x = t64(rng.standard_normal((4, 3)))
    assert ad.grad_check(lambda x, w1, w2: ffn(x), [x, ffn.fc1.weight, ffn.fc2.weight]) < 1e-5


def test_linear_shape_error(rng):
    with pytest.raises(ShapeError):
        Linear(3, 2, rng)(t64(np.zeros((1, 4))))


def test_parameter_names_are_dotted_paths(rng):
    names = [n for n, _ in mha64(4, 2).named_parameters()]
    assert names == ["q.weight", "q.bias", "k.weight", "k.bias", "v.weight", "v.bias", "o.weight", "o.bias"]


# -- attention dump ---------------------------------------------------------------
def test_token_coords():
    assert token_coords(0, 49) == (0, 0, 0)
    assert token_coords(49 + 8, 49) == (1, 1, 1)
    assert token_coords(5, 3) == (1, 0, 2)


@given(st.integers(1, 3), st.sampled_from([1, 4]), st.integers(0, 999))
def test_attention_csv_round_trip(tmp_path_factory, m, t, seed):
    r = np.random.default_rng(seed)
    att = mha64(4, 2, seed)
    records = []
    for layer, kind in enumerate(["sva", "dva"]):
        _, w, _ = att(t64(r.standard_normal((1, m * t, 4))), None,
                      build_attention_mask(kind, m, t, np.float64), record=True)
        records += [AttentionRecord(layer, h, MaskKind(kind), w[0, h]) for h in range(2)]
    path = tmp_path_factory.mktemp("dump") / "attention.csv"
    write_attention_csv(path, records, t)
    lines = path.read_text().splitlines()
    assert lines[0] == ATTENTION_HEADER
    assert len(lines) - 1 == sum(int((r.weights != 0).sum()) for r in records)
    back = {(r.layer, r.head, r.kind): r.weights for r in read_attention_csv(path, m, t)}
    for rec in records:
        if rec.weights.any():
            assert np.allclose(back[(rec.layer, rec.head, rec.kind)], rec.weights, rtol=1e-8, atol=0)
