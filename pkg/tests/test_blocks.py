"""Architecture blocks: shapes, worked values, oracles, and gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import amseg.tensor as T
from amseg.blocks import (CCB, DDWPP, MHSA, WMHSA, AttentionSpec, CCBSpec,
                          DDWPPSpec, ExpandingStage, ExpandingStageSpec,
                          WMHSASpec, cdwcc_forward, clamped_dilations)
from amseg.errors import ConfigError, ShapeError
from amseg.gradcheck import grad_check
from amseg.tensor import Tensor, active_record

from oracles import cdwcc_direct, mhsa_direct

BRANCHES = ((7, 16), (5, 8), (5, 4), (3, 2))


def rng_of(seed):
    return np.random.default_rng(seed)


def leaf(array):
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


# -- expanding stage -----------------------------------------------------------------


def test_expanding_stage_shape_and_params():
    stage = ExpandingStage(ExpandingStageSpec(64, 64, 2), rng=rng_of(0))
    x = Tensor(np.zeros((1, 64, 56, 56), dtype=np.float32))
    assert stage.forward(x).shape == (1, 64, 28, 28)
    assert stage.param_count() == 39040


def test_expanding_stage_indivisible_chunks():
    with pytest.raises(ShapeError):
        ExpandingStage(ExpandingStageSpec(64, 64, 3), rng=rng_of(0))


def test_expanding_stage_equals_manual_composition():
    spec = ExpandingStageSpec(8, 12, 2)
    stage = ExpandingStage(spec, rng=rng_of(1), dtype=np.float64)
    x = Tensor(rng_of(2).standard_normal((2, 8, 6, 6)))
    out = stage.forward(x)

    halves = T.split(x, 2, axis=1)
    refined = [stage.chunk_convs[i].forward(halves[i]) for i in range(2)]
    manual = T.relu(stage.merge.forward(T.concat(refined, axis=1)))
    np.testing.assert_array_equal(out.data, manual.data)


def test_expanding_stage_grad_check():
    stage = ExpandingStage(ExpandingStageSpec(4, 6, 2), rng=rng_of(3),
                           dtype=np.float64)
    x = leaf(rng_of(4).standard_normal((1, 4, 6, 6)))
    params = [p for _, p in stage.named_parameters()]
    report = grad_check(lambda x, *ps: stage.forward(x), [x] + params,
                        tol=1e-4, max_coords_per_input=30)
    assert report.passed, report.summary()


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 2))
@settings(max_examples=15, deadline=None)
def test_expanding_stage_output_shape_property(chunks, out_scale, batch):
    c_in = 4 * chunks
    c_out = 4 * out_scale
    stage = ExpandingStage(ExpandingStageSpec(c_in, c_out, chunks), rng=rng_of(5))
    x = Tensor(np.zeros((batch, c_in, 8, 8), dtype=np.float32))
    assert stage.forward(x).shape == (batch, c_out, 4, 4)
    active_record().reset()


# -- plain multi-head self-attention ---------------------------------------------


def test_attention_spec_head_divisibility():
    with pytest.raises(ConfigError):
        AttentionSpec(embed_dim=6, head_count=4, token_count=9)


def test_mhsa_preserves_shape_and_weights_are_stochastic():
    block = MHSA(AttentionSpec(8, 2, 16), rng=rng_of(6), dtype=np.float64)
    x = Tensor(rng_of(7).standard_normal((2, 8, 4, 4)))
    out, weights = block.forward_with_weights(x)
    assert out.shape == (2, 8, 4, 4)
    assert weights.shape == (2, 2, 16, 16)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_mhsa_matches_naive_oracle():
    block = MHSA(AttentionSpec(8, 2, 9), rng=rng_of(8), dtype=np.float64)
    x = rng_of(9).standard_normal((2, 8, 3, 3))
    out = block.forward(Tensor(x))
    expected = mhsa_direct(
        x, positional=block.positional.data,
        wq=block.query.weight.data, bq=block.query.bias.data,
        wk=block.key.weight.data, bk=block.key.bias.data,
        wv=block.value.weight.data, bv=block.value.bias.data,
        wo=block.out.weight.data, bo=block.out.bias.data, heads=2)
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_mhsa_token_count_mismatch():
    block = MHSA(AttentionSpec(8, 2, 16), rng=rng_of(10))
    with pytest.raises(ShapeError):
        block.forward(Tensor(np.zeros((1, 8, 3, 3), dtype=np.float32)))


def test_mhsa_grad_check():
    block = MHSA(AttentionSpec(4, 2, 4), rng=rng_of(11), dtype=np.float64)
    x = leaf(rng_of(12).standard_normal((1, 4, 2, 2)))
    params = [p for _, p in block.named_parameters()]
    report = grad_check(lambda x, *ps: block.forward(x), [x] + params,
                        tol=1e-4, max_coords_per_input=25)
    assert report.passed, report.summary()


# -- windowed attention ------------------------------------------------------------


def test_wmhsa_stage1_shape():
    block = WMHSA(WMHSASpec(channels=64, rate=4, tile_size=14, head_count=4),
                  rng=rng_of(13))
    x = Tensor(rng_of(14).standard_normal((1, 64, 56, 56)).astype(np.float32))
    assert block.forward(x).shape == (1, 64, 56, 56)


def test_wmhsa_has_rate_many_instances():
    block = WMHSA(WMHSASpec(64, 4, 14, 4), rng=rng_of(15))
    assert len(block.attentions) == 4
    # instances are independent: parameters are distinct objects
    tables = {id(a.positional) for a in block.attentions}
    assert len(tables) == 4


def test_wmhsa_rate1_covers_whole_map():
    block = WMHSA(WMHSASpec(8, 1, 6, 2), rng=rng_of(16), dtype=np.float64)
    x = Tensor(rng_of(17).standard_normal((1, 8, 6, 6)))
    assert block.forward(x).shape == (1, 8, 6, 6)


def test_wmhsa_rejects_non_square():
    block = WMHSA(WMHSASpec(8, 2, 3, 2), rng=rng_of(18))
    with pytest.raises(ShapeError):
        block.forward(Tensor(np.zeros((1, 8, 6, 4), dtype=np.float32)))


def test_wmhsa_rejects_extent_mismatch():
    block = WMHSA(WMHSASpec(8, 2, 3, 2), rng=rng_of(19))
    with pytest.raises(ShapeError):
        block.forward(Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32)))


def test_wmhsa_widening_uses_diagonal_tiles():
    """Zeroing everything except the diagonal tiles must not change the output."""
    block = WMHSA(WMHSASpec(4, 2, 2, 2), rng=rng_of(20), dtype=np.float64)
    rng = rng_of(21)
    x = rng.standard_normal((1, 4, 4, 4))
    masked = np.zeros_like(x)
    masked[:, :, :2, :2] = x[:, :, :2, :2]
    masked[:, :, 2:, 2:] = x[:, :, 2:, 2:]
    full = block.forward(Tensor(x))
    diag = block.forward(Tensor(masked))
    np.testing.assert_allclose(full.data, diag.data, atol=1e-12)


@pytest.mark.parametrize("rate", [1, 2, 4])
def test_wmhsa_grad_check_all_rates(rate):
    tile = 2
    block = WMHSA(WMHSASpec(4, rate, tile, 2), rng=rng_of(22 + rate),
                  dtype=np.float64)
    x = leaf(rng_of(30 + rate).standard_normal((1, 4, rate * tile, rate * tile)))
    params = [p for _, p in block.named_parameters()]
    report = grad_check(lambda x, *ps: block.forward(x), [x] + params,
                        tol=1e-4, max_coords_per_input=20)
    assert report.passed, report.summary()


def test_wmhsa_spec_grad_check_example():
    # 8x8 map tiled at rate 2
    block = WMHSA(WMHSASpec(4, 2, 4, 2), rng=rng_of(40), dtype=np.float64)
    x = leaf(rng_of(41).standard_normal((1, 4, 8, 8)))
    report = grad_check(lambda t: block.forward(t), [x], tol=1e-4,
                        max_coords_per_input=40)
    assert report.passed, report.summary()


# -- channel gating ------------------------------------------------------------------


def test_cdwcc_all_ones_worked_value():
    ones = Tensor(np.ones((1, 1, 4, 4), dtype=np.float64))
    out = cdwcc_forward(ones, Tensor(np.ones((1, 1, 4, 4), dtype=np.float64)))
    np.testing.assert_allclose(out.data, 0.7310585786300049, atol=1e-15)


def test_cdwcc_matches_loop_oracle():
    rng = rng_of(42)
    dec = rng.standard_normal((2, 3, 5, 5))
    enc = rng.standard_normal((2, 3, 5, 5))
    out = cdwcc_forward(Tensor(dec), Tensor(enc))
    np.testing.assert_allclose(out.data, cdwcc_direct(dec, enc), atol=1e-12)


def test_cdwcc_orthogonal_maps_gate_half():
    # zero inner product -> sigmoid(0) = 0.5 exactly
    dec = np.zeros((1, 1, 2, 2))
    dec[0, 0, 0, 0] = 3.0
    enc = np.zeros((1, 1, 2, 2))
    enc[0, 0, 1, 1] = 5.0
    out = cdwcc_forward(Tensor(dec), Tensor(enc))
    np.testing.assert_allclose(out.data, 0.5 * dec, atol=0)


def test_cdwcc_shape_mismatch():
    with pytest.raises(ShapeError):
        cdwcc_forward(Tensor(np.zeros((1, 2, 4, 4))),
                      Tensor(np.zeros((1, 2, 4, 5))))


def test_cdwcc_has_no_parameters():
    # function of its two inputs only; gradient flows into both
    dec = leaf(rng_of(43).standard_normal((1, 2, 3, 3)))
    enc = leaf(rng_of(44).standard_normal((1, 2, 3, 3)))
    report = grad_check(cdwcc_forward, [dec, enc], tol=1e-4)
    assert report.passed, report.summary()


# -- dilated depthwise pyramid --------------------------------------------------------


def test_ddwpp_param_count_example():
    block = DDWPP(DDWPPSpec(64, BRANCHES), rng=rng_of(45))
    assert block.param_count() == 7168


def test_ddwpp_preserves_shape_at_full_dilation():
    block = DDWPP(DDWPPSpec(8, BRANCHES), rng=rng_of(46))
    x = Tensor(np.zeros((1, 8, 112, 112), dtype=np.float32))
    assert block.forward(x).shape == (1, 8, 112, 112)
    assert clamped_dilations(block.spec, 112, 112) == (16, 8, 4, 2)


def test_ddwpp_clamps_small_maps():
    spec = DDWPPSpec(8, BRANCHES)
    assert clamped_dilations(spec, 7, 7) == (1, 1, 1, 2)
    assert clamped_dilations(spec, 14, 14) == (2, 3, 3, 2)
    assert clamped_dilations(spec, 28, 28) == (4, 6, 4, 2)
    assert clamped_dilations(spec, 56, 56) == (9, 8, 4, 2)


def test_ddwpp_small_map_shape_preserved():
    block = DDWPP(DDWPPSpec(16, BRANCHES), rng=rng_of(47))
    x = Tensor(rng_of(48).standard_normal((2, 16, 7, 7)).astype(np.float32))
    assert block.forward(x).shape == (2, 16, 7, 7)


def test_ddwpp_is_depthwise():
    """A perturbation in channel 0 must not leak into channel 1."""
    block = DDWPP(DDWPPSpec(4, BRANCHES), rng=rng_of(49), dtype=np.float64)
    rng = rng_of(50)
    x = rng.standard_normal((1, 4, 9, 9))
    bumped = x.copy()
    bumped[0, 0] += 1.0
    a = block.forward(Tensor(x)).data
    b = block.forward(Tensor(bumped)).data
    np.testing.assert_array_equal(a[0, 1:], b[0, 1:])
    assert np.any(a[0, 0] != b[0, 0])


def test_ddwpp_kernels_must_be_odd():
    with pytest.raises(ConfigError):
        DDWPPSpec(8, ((4, 2),))


def test_ddwpp_grad_check():
    block = DDWPP(DDWPPSpec(4, BRANCHES), rng=rng_of(51), dtype=np.float64)
    x = leaf(rng_of(52).standard_normal((1, 4, 8, 8)))
    params = [p for _, p in block.named_parameters()]
    report = grad_check(lambda x, *ps: block.forward(x), [x] + params,
                        tol=1e-4, max_coords_per_input=30)
    assert report.passed, report.summary()


# -- convolution-batchnorm block -------------------------------------------------------


def test_ccb_shape_and_param_count():
    block = CCB(CCBSpec(3, 16), rng=rng_of(53))
    x = Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32))
    assert block.forward(x).shape == (2, 16, 8, 8)
    # conv(3->16) + bn + conv(16->16) + bn
    assert block.param_count() == (16 * 3 * 9 + 16) + 32 + (16 * 16 * 9 + 16) + 32


def test_ccb_train_eval_differ_after_stats_update():
    block = CCB(CCBSpec(2, 4), rng=rng_of(54), dtype=np.float64)
    x = Tensor(rng_of(55).standard_normal((4, 2, 5, 5)))
    block.train()
    train_out = block.forward(x).data.copy()
    block.eval()
    eval_out = block.forward(x).data
    assert np.any(np.abs(train_out - eval_out) > 1e-6)


def test_ccb_grad_check_eval_mode():
    block = CCB(CCBSpec(2, 4), rng=rng_of(56), dtype=np.float64)
    block.eval()  # frozen statistics keep the function pure for probing
    x = leaf(rng_of(57).standard_normal((2, 2, 4, 4)))
    params = [p for _, p in block.named_parameters()]
    report = grad_check(lambda x, *ps: block.forward(x), [x] + params,
                        tol=1e-4, max_coords_per_input=30)
    assert report.passed, report.summary()
