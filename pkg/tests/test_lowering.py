import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uatcv.errors import ShapeError
from uatcv.lowering import (
    diamond,
    extract_mha_effective_matrix,
    lower_conv2d_1_O,
    lower_conv2d_I_O,
    lower_conv3d,
    lower_ffn,
    lower_mean_pool,
)
from uatcv.reference import (
    ConvParams,
    PoolParams,
    conv2d_direct,
    conv3d_direct,
    ffn_direct,
    mean_pool_direct,
    mha_direct,
    random_attn_params,
)
from uatcv.tensor import Tensor, TensorShape, flatten, matvec


def _t(axes, arr):
    arr = np.asarray(arr, dtype=np.float64)
    return Tensor(TensorShape(list(zip(axes, arr.shape))), arr)


def _rand_conv2d(rng, c_in=None, c_out=None, bias=False):
    c_in = c_in if c_in is not None else int(rng.integers(1, 4))
    c_out = c_out if c_out is not None else int(rng.integers(1, 4))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    h = int(rng.integers(max(kh - 2 * padding, 1), 7))
    w = int(rng.integers(max(kw - 2 * padding, 1), 7))
    h, w = max(h, kh - 2 * padding), max(w, kw - 2 * padding)
    x = _t(("C_I", "H", "W"), rng.normal(size=(c_in, h, w)))
    b = rng.normal(size=c_out) if bias else None
    p = ConvParams(c_in, c_out, (kh, kw), stride, padding, bias=b)
    kern = _t(("C_O", "C_I", "H", "W"), rng.normal(size=(c_out, c_in, kh, kw)))
    return x, p, kern


# ---------------------------------------------------------------------------
# diamond product
# ---------------------------------------------------------------------------


def test_diamond_identity():
    assert diamond(np.eye(2), np.array([5.0, 7.0])).tolist() == [5.0, 7.0]


def test_diamond_hand_value():
    # W^T x with W = [[1,2],[3,4]], x = (1,1): (1+3, 2+4) = (4, 6)
    out = diamond(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
    assert out.tolist() == [4.0, 6.0]


def test_diamond_mismatch():
    with pytest.raises(ShapeError):
        diamond(np.ones((3, 2)), np.ones(2))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_diamond_is_transposed_matvec_bitexact(rows, cols, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(rows, cols))
    x = rng.normal(size=rows)
    assert np.array_equal(diamond(w, x), matvec(w.T, x))


# ---------------------------------------------------------------------------
# conv2d lowering
# ---------------------------------------------------------------------------


def test_lower_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = _t(("C_I", "H", "W"), rng.normal(size=(1, 3, 3)))
    p = ConvParams(1, 1, (1, 1))
    kern = _t(("C_O", "C_I", "H", "W"), np.ones((1, 1, 1, 1)))
    form = lower_conv2d_1_O(x, p, kern)
    # exactly one unit entry per column
    assert np.array_equal((form.weight_matrix != 0).sum(axis=0), np.ones(9, dtype=int))
    assert np.array_equal(form.evaluate(), flatten(x))


def test_lower_conv2d_all_ones_column():
    x = _t(("C_I", "H", "W"), np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    p = ConvParams(1, 1, (2, 2))
    kern = _t(("C_O", "C_I", "H", "W"), np.ones((1, 1, 2, 2)))
    form = lower_conv2d_1_O(x, p, kern)
    assert form.weight_matrix.shape == (4, 1)
    assert np.array_equal(form.weight_matrix, np.ones((4, 1)))
    assert form.evaluate().tolist() == [10.0]


def test_lower_conv2d_1_O_requires_single_channel():
    rng = np.random.default_rng(1)
    x = _t(("C_I", "H", "W"), rng.normal(size=(2, 3, 3)))
    p = ConvParams(2, 1, (2, 2))
    kern = _t(("C_O", "C_I", "H", "W"), rng.normal(size=(1, 2, 2, 2)))
    with pytest.raises(ShapeError):
        lower_conv2d_1_O(x, p, kern)
    lower_conv2d_I_O(x, p, kern)  # general form accepts it


def test_lower_conv2d_1_O_random_oracle():
    rng = np.random.default_rng(2)
    for _ in range(30):
        x, p, kern = _rand_conv2d(rng, c_in=1, c_out=3)
        form = lower_conv2d_1_O(x, p, kern)
        direct = flatten(conv2d_direct(x, p, kern))
        assert np.max(np.abs(form.evaluate() - direct)) <= 1e-9


def test_lower_conv2d_channel_selection():
    rng = np.random.default_rng(3)
    x = _t(("C_I", "H", "W"), rng.normal(size=(2, 3, 3)))
    kern = np.zeros((2, 2, 1, 1))
    kern[:, 0, 0, 0] = 1.0  # every output channel copies input channel 0
    p = ConvParams(2, 2, (1, 1))
    form = lower_conv2d_I_O(x, p, _t(("C_O", "C_I", "H", "W"), kern))
    out = form.evaluate()
    chan0 = x.data[0].reshape(-1)
    assert np.array_equal(out, np.concatenate([chan0, chan0]))


def test_lower_conv2d_channel_sum():
    rng = np.random.default_rng(4)
    x = _t(("C_I", "H", "W"), rng.normal(size=(2, 3, 3)))
    p = ConvParams(2, 1, (1, 1))
    kern = _t(("C_O", "C_I", "H", "W"), np.ones((1, 2, 1, 1)))
    form = lower_conv2d_I_O(x, p, kern)
    assert np.max(np.abs(form.evaluate() - (x.data[0] + x.data[1]).reshape(-1))) < 1e-12


def test_lower_conv2d_I_O_random_oracle():
    rng = np.random.default_rng(5)
    for _ in range(60):
        x, p, kern = _rand_conv2d(rng, bias=bool(rng.integers(0, 2)))
        form = lower_conv2d_I_O(x, p, kern)
        direct = flatten(conv2d_direct(x, p, kern))
        assert np.max(np.abs(form.evaluate() - direct)) <= 1e-9


def test_lower_conv2d_block_grid_layout():
    # block (input channel j, output channel i) of W' carries kernel (i, j)
    rng = np.random.default_rng(6)
    x = _t(("C_I", "H", "W"), rng.normal(size=(2, 3, 3)))
    p = ConvParams(2, 2, (2, 2))
    kern = _t(("C_O", "C_I", "H", "W"), rng.normal(size=(2, 2, 2, 2)))
    form = lower_conv2d_I_O(x, p, kern)
    per_in, per_out = 9, 4
    assert form.weight_matrix.shape == (2 * per_in, 2 * per_out)
    for entry, src in zip(
        zip(form.weight_index_map.rows, form.weight_index_map.cols),
        form.weight_index_map.sources,
    ):
        row, col = entry
        o, c = src[0], src[1]
        assert row // per_in == c
        assert col // per_out == o


# ---------------------------------------------------------------------------
# structural invariants
# ---------------------------------------------------------------------------


def test_conv_lowering_sparsity_counts_no_padding():
    rng = np.random.default_rng(7)
    for _ in range(20):
        x, p, kern = _rand_conv2d(rng)
        if p.padding != 0:
            p = ConvParams(p.in_channels, p.out_channels, p.kernel, p.stride, 0)
        h, w = x.shape.extents[1:]
        if p.kernel[0] > h or p.kernel[1] > w:
            continue
        form = lower_conv2d_I_O(x, p, kern)
        h_out, w_out = p.out_extents((h, w))
        expected = p.out_channels * h_out * w_out * p.in_channels * p.kernel[0] * p.kernel[1]
        assert form.nnz == expected
        counts = form.weight_index_map.sharing_counts()
        assert len(counts) == p.out_channels * p.in_channels * p.kernel[0] * p.kernel[1]
        assert np.all(counts == h_out * w_out)


def test_conv_lowering_index_map_unique_and_complete():
    rng = np.random.default_rng(8)
    x, p, kern = _rand_conv2d(rng)
    form = lower_conv2d_I_O(x, p, kern)
    cells = list(zip(form.weight_index_map.rows.tolist(), form.weight_index_map.cols.tolist()))
    assert len(cells) == len(set(cells))  # every cell traces to exactly one element
    mask = np.zeros(form.weight_matrix.shape, dtype=bool)
    mask[form.weight_index_map.rows, form.weight_index_map.cols] = True
    assert np.all(form.weight_matrix[~mask] == 0.0)
    # structural cells carry exactly the kernel element the map claims
    vals = form.weight_matrix[form.weight_index_map.rows, form.weight_index_map.cols]
    claimed = kern.data[tuple(form.weight_index_map.sources.T)]
    assert np.array_equal(vals, claimed)


def test_conv_lowering_linear_in_kernel():
    rng = np.random.default_rng(9)
    x, p, _ = _rand_conv2d(rng)
    shape = (p.out_channels, p.in_channels, *p.kernel)
    k1 = rng.normal(size=shape)
    k2 = rng.normal(size=shape)
    f1 = lower_conv2d_I_O(x, p, _t(("C_O", "C_I", "H", "W"), k1))
    f2 = lower_conv2d_I_O(x, p, _t(("C_O", "C_I", "H", "W"), k2))
    f12 = lower_conv2d_I_O(x, p, _t(("C_O", "C_I", "H", "W"), k1 + k2))
    assert np.array_equal(f12.weight_matrix, f1.weight_matrix + f2.weight_matrix)


def test_conv_lowering_input_map_is_plain_flatten():
    rng = np.random.default_rng(10)
    x, p, kern = _rand_conv2d(rng)
    form = lower_conv2d_I_O(x, p, kern)
    assert len(form.replicated_sources()) == 0
    c, h, w = x.shape.extents
    assert np.array_equal(
        form.input_index_map, np.indices((c, h, w)).reshape(3, -1).T
    )


# ---------------------------------------------------------------------------
# conv3d lowering
# ---------------------------------------------------------------------------


def test_lower_conv3d_identity():
    rng = np.random.default_rng(11)
    x = _t(("C_I", "H", "W", "D"), rng.normal(size=(1, 2, 3, 2)))
    p = ConvParams(1, 1, (1, 1, 1))
    kern = _t(("C_O", "C_I", "H", "W", "D"), np.ones((1, 1, 1, 1, 1)))
    form = lower_conv3d(x, p, kern)
    assert np.max(np.abs(form.evaluate() - flatten(x, ("C_I", "D", "H", "W")))) < 1e-12


def test_lower_conv3d_total_sum():
    rng = np.random.default_rng(12)
    x = _t(("C_I", "H", "W", "D"), rng.normal(size=(2, 2, 2, 2)))
    p = ConvParams(2, 1, (2, 2, 2))
    kern = _t(("C_O", "C_I", "H", "W", "D"), np.ones((1, 2, 2, 2, 2)))
    form = lower_conv3d(x, p, kern)
    assert form.evaluate().shape == (1,)
    assert abs(form.evaluate()[0] - x.data.sum()) < 1e-12


def test_lower_conv3d_random_oracle():
    rng = np.random.default_rng(13)
    for _ in range(40):
        c_in = int(rng.integers(1, 3))
        c_out = int(rng.integers(1, 3))
        ks = tuple(int(k) for k in rng.integers(1, 3, size=3))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        spatial = tuple(int(rng.integers(k, 5)) for k in ks)
        x = _t(("C_I", "H", "W", "D"), rng.normal(size=(c_in, *spatial)))
        p = ConvParams(c_in, c_out, ks, stride, padding)
        kern = _t(("C_O", "C_I", "H", "W", "D"), rng.normal(size=(c_out, c_in, *ks)))
        form = lower_conv3d(x, p, kern)
        direct = flatten(conv3d_direct(x, p, kern), ("C_O", "D", "H", "W"))
        assert np.max(np.abs(form.evaluate() - direct)) <= 1e-9


# ---------------------------------------------------------------------------
# mean pool lowering
# ---------------------------------------------------------------------------


def test_lower_mean_pool_quarter_column():
    x = _t(("C_I", "H", "W"), np.arange(4.0).reshape(1, 2, 2))
    form = lower_mean_pool(x, PoolParams((2, 2)))
    assert form.weight_matrix.shape == (4, 1)
    assert np.array_equal(form.weight_matrix[:, 0], np.full(4, 0.25))


def test_lower_mean_pool_columns_sum_to_one():
    rng = np.random.default_rng(14)
    for _ in range(20):
        c = int(rng.integers(1, 4))
        kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        h, w = int(rng.integers(kh, 7)), int(rng.integers(kw, 7))
        x = _t(("C_I", "H", "W"), rng.normal(size=(c, h, w)))
        form = lower_mean_pool(x, PoolParams((kh, kw), stride))
        sums = form.weight_matrix.sum(axis=0)
        assert np.max(np.abs(sums - 1.0)) <= 1e-12


def test_lower_mean_pool_matches_direct():
    rng = np.random.default_rng(15)
    x = _t(("C_I", "H", "W"), rng.normal(size=(2, 4, 4)))
    p = PoolParams((2, 2), stride=2)
    form = lower_mean_pool(x, p)
    direct = flatten(mean_pool_direct(x, p))
    assert np.max(np.abs(form.evaluate() - direct)) <= 1e-12


# ---------------------------------------------------------------------------
# FFN lowering
# ---------------------------------------------------------------------------


def _identity_ffn_params(d):
    from uatcv.reference import AttnParams

    return AttnParams(
        model_dim=d, heads=1,
        w_q=np.zeros((d, d)), w_k=np.zeros((d, d)),
        w_v=np.zeros((d, d)), w_o=np.zeros((d, d)),
        w_2=np.eye(d), w_3=np.eye(d), b_2=np.zeros(d), b_3=np.zeros(d),
    )


def test_lower_ffn_identity_net():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(3, 4))
    p = _identity_ffn_params(4)
    _, stage2 = lower_ffn(x, p, "identity")
    assert np.max(np.abs(stage2.evaluate() - x.reshape(-1))) < 1e-12


def test_lower_ffn_zero_outer_gives_bias():
    from uatcv.reference import AttnParams

    d = 3
    p = AttnParams(
        model_dim=d, heads=1,
        w_q=np.zeros((d, d)), w_k=np.zeros((d, d)),
        w_v=np.zeros((d, d)), w_o=np.zeros((d, d)),
        w_2=np.ones((d, 2)), w_3=np.zeros((2, d)),
        b_2=np.zeros(2), b_3=np.array([1.0, 2.0, 3.0]),
    )
    x = np.random.default_rng(17).normal(size=(2, d))
    _, stage2 = lower_ffn(x, p, "relu")
    assert np.array_equal(stage2.evaluate(), np.tile(p.b_3, 2))


def test_lower_ffn_random_oracle():
    rng = np.random.default_rng(18)
    for _ in range(30):
        d = int(rng.integers(2, 6))
        n = int(rng.integers(1, 5))
        p = random_attn_params(d, 1, int(rng.integers(1, 6)), rng)
        x = rng.normal(size=(n, d))
        _, stage2 = lower_ffn(x, p, "relu")
        assert np.max(np.abs(stage2.evaluate() - ffn_direct(x, p, "relu").reshape(-1))) <= 1e-9


def test_lower_ffn_weight_replication():
    rng = np.random.default_rng(19)
    p = random_attn_params(3, 1, 4, rng)
    x = rng.normal(size=(5, 3))
    stage1, _ = lower_ffn(x, p, "relu")
    counts = stage1.weight_index_map.sharing_counts()
    assert len(counts) == 3 * 4  # one group per w_2 element
    assert np.all(counts == 5)  # shared across the 5 tokens


# ---------------------------------------------------------------------------
# attention effective matrix
# ---------------------------------------------------------------------------


def test_effective_matrix_single_token():
    rng = np.random.default_rng(20)
    p = random_attn_params(4, 2, 5, rng)
    x = rng.normal(size=(1, 4))
    m = extract_mha_effective_matrix(x, p)
    assert np.max(np.abs(m @ x.reshape(-1) - mha_direct(x, p).reshape(-1))) < 1e-12


def test_effective_matrix_identical_tokens_identical_blocks():
    rng = np.random.default_rng(21)
    p = random_attn_params(4, 2, 5, rng)
    row = rng.normal(size=4)
    x = np.stack([row, row])
    m = extract_mha_effective_matrix(x, p)
    assert np.max(np.abs(m[:4] - m[4:])) < 1e-12


def test_effective_matrix_random_oracle():
    rng = np.random.default_rng(22)
    for _ in range(40):
        heads = int(rng.integers(1, 3))
        d = heads * int(rng.integers(1, 4))
        n = int(rng.integers(1, 5))
        p = random_attn_params(d, heads, 3, rng)
        x = rng.normal(size=(n, d))
        m = extract_mha_effective_matrix(x, p)
        assert np.max(np.abs(m @ x.reshape(-1) - mha_direct(x, p).reshape(-1))) <= 1e-9


def test_effective_matrix_is_frozen_at_its_input():
    # exact at X; stale (generically wrong) at X + delta with n >= 2
    rng = np.random.default_rng(23)
    p = random_attn_params(4, 2, 5, rng)
    x = rng.normal(size=(3, 4))
    m = extract_mha_effective_matrix(x, p)
    assert np.max(np.abs(m @ x.reshape(-1) - mha_direct(x, p).reshape(-1))) <= 1e-9
    delta = 0.3 * rng.normal(size=x.shape)
    stale = m @ (x + delta).reshape(-1)
    fresh = mha_direct(x + delta, p).reshape(-1)
    assert np.max(np.abs(stale - fresh)) > 1e-6
