import numpy as np
import pytest

from uatcv.analysis import (
    LoraDelta,
    PruneMask,
    apply_lora,
    channel_norms,
    count_uat_terms,
    lora_equivalence_check,
    prune,
    prune_impact,
    receptive_field,
)
from uatcv.errors import RankError, SpecError
from uatcv.lowering import lower_conv2d_I_O
from uatcv.netspec import (
    Conv2dSpec,
    MeanPoolSpec,
    MhaSpec,
    NetworkSpec,
    ResidualBlockSpec,
    TransformerBlockSpec,
    forward,
    materialize,
    random_input,
)
from uatcv.tensor import Tensor, TensorShape

from oracles import impulse_receptive_field


def _net(input_dims, layers, seed=5, activation="relu"):
    return NetworkSpec(
        input_shape=TensorShape(input_dims),
        seed=seed,
        activation=activation,
        layers=tuple(layers),
    )


def _conv_net(seed=5):
    return _net(
        [("C_I", 2), ("H", 6), ("W", 6)],
        [
            Conv2dSpec(out_channels=4, kernel=(2, 2), bias=True),
            Conv2dSpec(out_channels=3, kernel=(2, 2), bias=True),
        ],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# term counts
# ---------------------------------------------------------------------------


def test_count_terms_residual_single_block():
    net = _net([("feature", 6)], [ResidualBlockSpec(hidden_dim=4)])
    rows = count_uat_terms(net)
    assert rows[0].n_terms == 1


def test_count_terms_residual_growth():
    net = _net([("feature", 6)], [ResidualBlockSpec(hidden_dim=4)] * 3)
    rows = count_uat_terms(net)
    counts = [r.n_terms for r in rows]
    assert counts == [1, 2, 3]


def test_count_terms_strictly_monotone():
    net = _net([("feature", 5)], [ResidualBlockSpec(hidden_dim=3)] * 4)
    counts = [r.n_terms for r in count_uat_terms(net)]
    assert all(b > a for a, b in zip(counts, counts[1:]))


def test_count_terms_vgg_prefixes():
    net = _conv_net()
    counts = [r.n_terms for r in count_uat_terms(net)]
    assert counts == [1, 2]


def test_count_terms_mid_pool_prefix_flagged():
    net = _net(
        [("C_I", 1), ("H", 6), ("W", 6)],
        [
            Conv2dSpec(out_channels=2, kernel=(2, 2)),
            MeanPoolSpec(window=(2, 2)),
            Conv2dSpec(out_channels=2, kernel=(2, 2)),
        ],
    )
    rows = count_uat_terms(net)
    assert rows[0].n_terms == 1
    assert rows[1].n_terms is None and rows[1].note
    assert rows[2].n_terms == 2


def test_count_terms_unexpandable():
    net = _net(
        [("token", 4), ("feature", 4)],
        [MhaSpec(heads=2), TransformerBlockSpec(heads=2, hidden_dim=4)],
    )
    rows = count_uat_terms(net)
    assert rows[-1].n_terms is None


# ---------------------------------------------------------------------------
# receptive field
# ---------------------------------------------------------------------------


def test_rf_single_conv3():
    net = _net(
        [("C_I", 1), ("H", 8), ("W", 8)], [Conv2dSpec(out_channels=1, kernel=(3, 3))]
    )
    assert receptive_field(net)[-1] == {"H": 3, "W": 3}


def test_rf_two_stacked_conv3():
    net = _net(
        [("C_I", 1), ("H", 8), ("W", 8)],
        [Conv2dSpec(out_channels=1, kernel=(3, 3))] * 2,
    )
    assert receptive_field(net)[-1] == {"H": 5, "W": 5}


def test_rf_conv_pool_conv_matches_impulse_oracle():
    net = _net(
        [("C_I", 1), ("H", 16), ("W", 16)],
        [
            Conv2dSpec(out_channels=1, kernel=(3, 3)),
            MeanPoolSpec(window=(2, 2), stride=2),
            Conv2dSpec(out_channels=1, kernel=(3, 3)),
        ],
    )
    got = receptive_field(net)[-1]["H"]
    want = impulse_receptive_field([(3, 1, False), (2, 2, True), (3, 1, False)], 16)
    assert got == want == 8


def test_rf_rejects_attention():
    net = _net([("token", 4), ("feature", 4)], [MhaSpec(heads=2)])
    with pytest.raises(SpecError):
        receptive_field(net)


def test_rf_nonsquare_kernels_tracked_per_axis():
    net = _net(
        [("C_I", 1), ("H", 8), ("W", 8)],
        [Conv2dSpec(out_channels=1, kernel=(3, 2)), Conv2dSpec(out_channels=1, kernel=(2, 3))],
    )
    assert receptive_field(net)[-1] == {"H": 4, "W": 4}


# ---------------------------------------------------------------------------
# low-rank updates
# ---------------------------------------------------------------------------


def test_lora_zero_factors_identity():
    net = materialize(_conv_net())
    rt = net.layers[0]
    n = rt.conv_params.in_channels * rt.conv_params.kernel[0] * rt.conv_params.kernel[1]
    delta = LoraDelta(layer=0, a=np.zeros((1, n)), b=np.zeros((rt.conv_params.out_channels, 1)))
    patched = apply_lora(net, delta)
    x = random_input(net.spec, 99)
    assert np.array_equal(forward(net, x)[-1].data, forward(patched, x)[-1].data)


def test_lora_rank1_ffn_matches_direct():
    from dataclasses import replace

    from uatcv.reference import ffn_direct

    net = materialize(
        _net(
            [("token", 3), ("feature", 4)],
            [TransformerBlockSpec(heads=2, hidden_dim=5)],
            seed=8,
        )
    )
    rng = np.random.default_rng(0)
    p = net.layers[0].attn_params
    b = rng.normal(size=(p.w_2.shape[0], 1))
    a = rng.normal(size=(1, p.w_2.shape[1]))
    delta = LoraDelta(layer=0, a=a, b=b, target="w_2")
    patched = apply_lora(net, delta)
    x = random_input(net.spec, 7)
    tokens = x.data.reshape(3, 4)
    manual = replace(p, w_2=p.w_2 + b @ a)
    from uatcv.reference import mha_direct

    h = mha_direct(tokens, manual)
    want = h + ffn_direct(h, manual, "relu")
    got = forward(patched, x)[-1].data
    assert np.max(np.abs(got - want)) <= 1e-9


def test_lora_conv_lowering_linearity():
    net = materialize(_conv_net(seed=13))
    rt = net.layers[0]
    rng = np.random.default_rng(1)
    m = rt.conv_params.out_channels
    n = rt.conv_params.in_channels * rt.conv_params.kernel[0] * rt.conv_params.kernel[1]
    delta = LoraDelta(layer=0, a=rng.normal(size=(2, n)), b=rng.normal(size=(m, 2)))
    x = random_input(net.spec, 3)
    report = lora_equivalence_check(net, delta, x)
    assert report["lowering_linearity_max_abs"] == 0.0
    assert report["untouched_layers_identical"] is True
    assert report["output_max_abs_change"] > 0.0


def test_lora_residual_target():
    net = materialize(_net([("feature", 6)], [ResidualBlockSpec(hidden_dim=4)], seed=2))
    rng = np.random.default_rng(5)
    delta = LoraDelta(layer=0, a=rng.normal(size=(1, 6)), b=rng.normal(size=(4, 1)), target="w_1")
    patched = apply_lora(net, delta)
    r0, r1 = net.layers[0].residual, patched.layers[0].residual
    assert np.array_equal(r1.w_1, r0.w_1 + delta.update())
    assert np.array_equal(r1.w_2, r0.w_2)


def test_lora_rank_bounds():
    with pytest.raises(RankError):
        LoraDelta(layer=0, a=np.zeros((3, 2)), b=np.zeros((2, 3)))  # rank 3 > min(2,2)
    with pytest.raises(RankError):
        LoraDelta(layer=0, a=np.zeros((0, 4)), b=np.zeros((4, 0)))


def test_lora_rank_by_construction():
    rng = np.random.default_rng(6)
    for _ in range(50):
        m, n = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        r = int(rng.integers(1, min(m, n) + 1))
        delta = LoraDelta(layer=0, a=rng.normal(size=(r, n)), b=rng.normal(size=(m, r)))
        assert np.linalg.matrix_rank(delta.update()) <= r


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


def test_prune_dead_channel_zero_impact():
    net = materialize(_conv_net(seed=17))
    rt = net.layers[0]
    w = rt.conv_weights.data.copy()
    w[1] = 0.0  # kill channel 1's kernels
    rt.conv_weights = Tensor(rt.conv_weights.shape, w)
    bias = rt.conv_params.bias.copy()
    bias[1] = 0.0
    from dataclasses import replace

    rt.conv_params = replace(rt.conv_params, bias=bias)
    inputs = [random_input(net.spec, 50 + t) for t in range(5)]
    report = prune_impact(net, PruneMask(layer=0, channels=(1,)), inputs, "relu")
    assert report["max_deviation"] == 0.0


def test_prune_lower_commutes_with_block_deletion():
    net = materialize(_conv_net(seed=19))
    mask = PruneMask(layer=0, channels=(1, 2))
    pruned = prune(net, mask)

    # original lowered matrix with the masked output-channel block columns
    # deleted must equal the lowered pruned layer, entrywise
    rt = net.layers[0]
    x = random_input(net.spec, 4)
    form = lower_conv2d_I_O(x, rt.conv_params, rt.conv_weights)
    h_out = rt.out_shape.extent("H") * rt.out_shape.extent("W")
    keep_cols = np.concatenate(
        [np.arange(c * h_out, (c + 1) * h_out) for c in (0, 3)]
    )
    expected = form.weight_matrix[:, keep_cols]
    prt = pruned.layers[0]
    pform = lower_conv2d_I_O(x, prt.conv_params, prt.conv_weights)
    assert np.array_equal(pform.weight_matrix, expected)

    # downstream conv loses the matching input-channel block rows
    rt1 = net.layers[1]
    val1 = Tensor(rt1.in_shape, np.zeros(rt1.in_shape.extents))
    form1 = lower_conv2d_I_O(val1, rt1.conv_params, rt1.conv_weights)
    per_in = rt1.in_shape.extent("H") * rt1.in_shape.extent("W")
    keep_rows = np.concatenate(
        [np.arange(c * per_in, (c + 1) * per_in) for c in (0, 3)]
    )
    prt1 = pruned.layers[1]
    pval1 = Tensor(prt1.in_shape, np.zeros(prt1.in_shape.extents))
    pform1 = lower_conv2d_I_O(pval1, prt1.conv_params, prt1.conv_weights)
    assert np.array_equal(pform1.weight_matrix, form1.weight_matrix[keep_rows])


def test_prune_all_channels_rejected():
    net = materialize(_conv_net())
    with pytest.raises(SpecError):
        prune(net, PruneMask(layer=0, channels=(0, 1, 2, 3)))


def test_prune_threshold_selects_smallest():
    net = materialize(_conv_net(seed=23))
    norms = channel_norms(net, 0)
    cut = float(np.sort(norms)[1])  # prune exactly the smallest channel
    mask = PruneMask(layer=0, threshold=cut)
    pruned = prune(net, mask)
    assert pruned.layers[0].conv_params.out_channels == 3


def test_prune_magnitude_ordering_reported():
    net = materialize(_conv_net(seed=29))
    norms = channel_norms(net, 0)
    lo, hi = int(np.argmin(norms)), int(np.argmax(norms))
    inputs = [random_input(net.spec, 100 + t) for t in range(10)]
    low = prune_impact(net, PruneMask(layer=0, channels=(lo,)), inputs, "relu")
    high = prune_impact(net, PruneMask(layer=0, channels=(hi,)), inputs, "relu")
    # descriptive report only; both runs must carry comparable fields
    assert set(low) == set(high)
    assert low["pruned_channels"] == [lo] and high["pruned_channels"] == [hi]


def test_prune_last_layer_compares_surviving_channels():
    net = materialize(
        _net(
            [("C_I", 1), ("H", 5), ("W", 5)],
            [Conv2dSpec(out_channels=3, kernel=(2, 2), bias=True)],
            seed=31,
        )
    )
    inputs = [random_input(net.spec, 7)]
    report = prune_impact(net, PruneMask(layer=0, channels=(2,)), inputs, "relu")
    assert report["max_deviation"] == 0.0  # surviving channels are untouched


def test_prune_mask_validation():
    with pytest.raises(SpecError):
        PruneMask(layer=0)
    with pytest.raises(SpecError):
        PruneMask(layer=0, channels=(0,), threshold=0.5)
