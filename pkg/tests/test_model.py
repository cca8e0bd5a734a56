import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfformer import nn
from mfformer.gradcheck import gradcheck_report
from mfformer.model import (
    VARIANTS,
    ConfigError,
    MFFormer,
    ModelConfig,
    TokenMatrix,
    align_and_stack,
    dimension_down,
    dimension_up,
    ftm_attention,
    ftm_restore,
    stage_shapes,
    token_count,
)
from mfformer.tensor import Tensor, no_grad, reduce_sum, split, concatenate


def tiny(**kw):
    base = dict(fmri_shape=(32, 32), t1w_shape=(16, 16, 16), base_channels=2, attention_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def inputs(cfg, batch=3, seed=0):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.normal(size=(batch, 1) + cfg.fmri_shape)),
            Tensor(rng.normal(size=(batch, 1) + cfg.t1w_shape)))


def attention_params(rng, c, d, n_pos):
    return [Tensor(rng.normal(size=s)) for s in ((c, d), (c, d), (c, d), (d, c), (n_pos, c))]


def graph_ops(out):
    seen, stack, ops = set(), [out], []
    while stack:
        t = stack.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        ops.append((t.node.op, [p.shape for p in t.node.parents]))
        stack.extend(t.node.parents)
    return ops


# --- config ------------------------------------------------------------------

def test_config_defaults():
    cfg = ModelConfig()
    assert (cfg.base_channels, cfg.n_encoder_layers, cfg.attention_dim, cfg.mlp_hidden, cfg.n_classes) == (8, 5, 128, 20, 2)
    assert cfg.fmri_shape == (124, 1000) and cfg.n_heads == 1


def test_channel_schedule_doubles():
    assert ModelConfig().stage_channels() == [8, 16, 32, 64, 128]
    m = MFFormer(tiny())
    for f, s, c in zip(m.fmri_stages, m.t1w_stages, m.config.stage_channels()):
        assert f.conv.weight.shape[0] == s.conv.weight.shape[0] == c


def test_config_json_round_trip_and_strictness():
    cfg = tiny(fusion_strategy="dim3", ftm_placement="last1")
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"base_channels": 4, "kernel": 3})


@pytest.mark.parametrize("bad", [
    dict(fusion_strategy="dim5"), dict(ftm_placement="last2"), dict(fmri_shape=(8, 32)),
    dict(t1w_shape=(16, 16)), dict(attention_dim=9, n_heads=2), dict(kernel_size=4), dict(n_classes=3),
])
def test_config_rejects_inconsistencies(bad):
    with pytest.raises(ConfigError):
        tiny(**bad)


# --- encoders ------------------------------------------------------------------

def test_stage_shape_arithmetic():
    assert stage_shapes((124, 1000), 5) == [(62, 500), (31, 250), (15, 125), (7, 62), (3, 31)]
    assert stage_shapes((32, 32, 32), 5)[-1] == (1, 1, 1)
    assert stage_shapes((64, 64, 48), 5)[2] == (8, 8, 6)


def test_encode_fmri_full_size_stage_shapes():
    m = MFFormer(ModelConfig.for_variant("baseline2"))
    x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 124, 1000)))
    with no_grad():
        shapes = [o.shape[1:] for o in m.encode_fmri(x)]
    assert shapes == [(8, 62, 500), (16, 31, 250), (32, 15, 125), (64, 7, 62), (128, 3, 31)]


def test_encode_fmri_minimal_input():
    m = MFFormer(ModelConfig.desk(fmri_shape=(32, 32), fusion_strategy="none_fmri"))
    with no_grad():
        assert m.encode_fmri(Tensor(np.random.default_rng(0).normal(size=(2, 1, 32, 32))))[-1].shape == (2, 128, 1, 1)


def test_encode_t1w_shapes():
    m = MFFormer(ModelConfig.desk(fusion_strategy="none_t1w"))
    with no_grad():
        assert m.encode_t1w(Tensor(np.random.default_rng(0).normal(size=(1, 1, 32, 32, 32))))[-1].shape == (1, 128, 1, 1, 1)
    m = MFFormer(ModelConfig.desk(t1w_shape=(64, 64, 48), fusion_strategy="none_t1w"))
    with no_grad():
        outs = m.encode_t1w(Tensor(np.random.default_rng(0).normal(size=(1, 1, 64, 64, 48))))
    assert outs[2].shape == (1, 32, 8, 8, 6)


# --- dimension alignment ------------------------------------------------------------

def test_dimension_up_repeats(rng):
    x = Tensor(rng.normal(size=(2, 8, 4, 4)))
    up = dimension_up(x, 3)
    assert up.shape == (2, 8, 4, 4, 3)
    for k in range(3):
        np.testing.assert_array_equal(up.data[..., k], x.data)
    np.testing.assert_array_equal(dimension_up(x, 1).data[..., 0], x.data)
    np.testing.assert_array_equal(dimension_down(up).data, x.data)


def test_align_min_shape_example(rng):
    f = Tensor(rng.normal(size=(1, 128, 3, 31)))
    s = Tensor(rng.normal(size=(1, 128, 1, 1, 1)))
    tok = align_and_stack(f, s, "dim4")
    assert tok.aligned_shape == (1, 1, 1) and tok.tokens.shape == (1, 2, 128)
    np.testing.assert_allclose(tok.tokens.data[0, 0], f.data[0].mean(axis=(1, 2)), rtol=1e-12)


def test_align_identical_shapes_is_flatten_concat(rng):
    f = rng.normal(size=(2, 4, 3, 5))
    s = rng.normal(size=(2, 4, 3, 5, 1))
    tok = align_and_stack(Tensor(f), Tensor(s), "dim4").tokens.data
    expect = np.concatenate([f.reshape(2, 4, -1), s.reshape(2, 4, -1)], axis=2).transpose(0, 2, 1)
    np.testing.assert_array_equal(tok, expect)


def test_align_dim3_unit_depth_is_squeeze(rng):
    f = rng.normal(size=(2, 4, 3, 5))
    s = rng.normal(size=(2, 4, 3, 5, 1))
    tok = align_and_stack(Tensor(f), Tensor(s), "dim3")
    assert tok.n_tokens == 2 * 15
    np.testing.assert_array_equal(tok.tokens.data[:, 15:], s[..., 0].reshape(2, 4, -1).transpose(0, 2, 1))


def test_align_channel_mismatch(rng):
    with pytest.raises(ValueError, match="channel"):
        align_and_stack(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4, 4))), "dim4")


@settings(max_examples=80, deadline=None)
@given(st.tuples(*[st.integers(1, 6)] * 2), st.tuples(*[st.integers(1, 6)] * 3), st.sampled_from(["dim3", "dim4"]))
def test_token_count_law(fs, ss, strategy):
    f = Tensor(np.ones((1, 2) + fs))
    s = Tensor(np.ones((1, 2) + ss))
    tok = align_and_stack(f, s, strategy)
    if strategy == "dim4":
        common = (min(fs[0], ss[0]), min(fs[1], ss[1]), ss[2])
    else:
        common = (min(fs[0], ss[0]), min(fs[1], ss[1]))
    assert tok.aligned_shape == common
    assert tok.n_tokens == 2 * int(np.prod(common)) == token_count(fs, ss, strategy)


# --- attention ---------------------------------------------------------------------

def test_zero_value_weights_give_residual_identity(rng):
    x = rng.normal(size=(2, 6, 5))
    wq, wk, wv, wo, pos = attention_params(rng, 5, 4, 10)
    wv = Tensor(np.zeros((5, 4)))
    out = ftm_attention(TokenMatrix(Tensor(x), (3,)), wq, wk, wv, wo, pos)
    np.testing.assert_array_equal(out.tokens.data, x)


def test_single_token_attention(rng):
    x = rng.normal(size=(1, 1, 5))
    wq, wk, wv, wo, pos = attention_params(rng, 5, 4, 3)
    out = ftm_attention(TokenMatrix(Tensor(x), (1,)), wq, wk, wv, wo, pos).tokens.data
    v = (x[0] + pos.data[:1]) @ wv.data
    np.testing.assert_allclose(out[0], x[0] + v @ wo.data, rtol=1e-13)


def _permuted_outputs(rng, pos_scale):
    x = rng.normal(size=(1, 6, 5))
    wq, wk, wv, wo, pos = attention_params(rng, 5, 4, 6)
    pos = Tensor(pos.data * pos_scale)
    perm = rng.permutation(6)
    while np.all(perm == np.arange(6)):
        perm = rng.permutation(6)
    a = ftm_attention(TokenMatrix(Tensor(x), (3,)), wq, wk, wv, wo, pos).tokens.data
    b = ftm_attention(TokenMatrix(Tensor(x[:, perm]), (3,)), wq, wk, wv, wo, pos).tokens.data
    return a[:, perm], b


@pytest.mark.parametrize("seed", range(5))
def test_permutation_equivariance_without_position(seed):
    a, b = _permuted_outputs(np.random.default_rng(seed), 0.0)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("seed", range(5))
def test_position_embedding_breaks_equivariance(seed):
    a, b = _permuted_outputs(np.random.default_rng(seed), 1.0)
    assert np.max(np.abs(a - b)) > 1e-3


def test_residual_on_embedded_toggle(rng):
    x = rng.normal(size=(1, 4, 3))
    wq, wk, _, wo, pos = attention_params(rng, 3, 2, 4)
    zero_v = Tensor(np.zeros((3, 2)))
    out = ftm_attention(TokenMatrix(Tensor(x), (2,)), wq, wk, zero_v, wo, pos, residual_on_embedded=True)
    np.testing.assert_allclose(out.tokens.data, x + pos.data[None], rtol=1e-15)


def test_token_overflow_rejected(rng):
    params = attention_params(rng, 3, 2, 4)
    with pytest.raises(ValueError, match="position table"):
        ftm_attention(TokenMatrix(Tensor(np.zeros((1, 5, 3))), (5,)), *params)


def test_multi_head_matches_single_head_for_one_head(rng):
    x = rng.normal(size=(2, 6, 4))
    params = attention_params(rng, 4, 6, 6)
    one = ftm_attention(TokenMatrix(Tensor(x), (3,)), *params, n_heads=1).tokens.data
    three = ftm_attention(TokenMatrix(Tensor(x), (3,)), *params, n_heads=3).tokens.data
    assert one.shape == three.shape and not np.allclose(one, three)


# --- restore --------------------------------------------------------------------------

@pytest.mark.parametrize("strategy", ["dim4", "dim3"])
def test_identity_round_trip_doubles(rng, strategy):
    f = rng.normal(size=(2, 3, 4, 5))
    s = rng.normal(size=(2, 3, 4, 5, 1 if strategy == "dim3" else 3))
    tok = align_and_stack(Tensor(f), Tensor(s), strategy)
    fo, so = ftm_restore(tok, Tensor(f), Tensor(s), strategy)
    np.testing.assert_array_equal(fo.data, 2 * f)
    np.testing.assert_array_equal(so.data, 2 * s)


def test_dim3_restore_repeats_across_depth(rng):
    f = Tensor(rng.normal(size=(1, 2, 4, 4)))
    s = Tensor(rng.normal(size=(1, 2, 2, 2, 3)))
    tok = align_and_stack(f, s, "dim3")
    fo, so = ftm_restore(tok, f, s, "dim3")
    assert fo.shape == f.shape and so.shape == s.shape
    added = so.data - s.data  # (s + r) - s recovers r only up to rounding
    for k in range(1, 3):
        np.testing.assert_allclose(added[..., k], added[..., 0], rtol=0, atol=1e-15)


def test_split_halves_reconcatenate(rng):
    tok = Tensor(rng.normal(size=(2, 8, 3)))
    np.testing.assert_array_equal(concatenate(split(tok, [4, 4], axis=1), axis=1).data, tok.data)


def test_restore_rejects_inconsistent_tokens(rng):
    tok = TokenMatrix(Tensor(np.zeros((1, 6, 2))), (2, 2, 1))
    with pytest.raises(ValueError):
        ftm_restore(tok, Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((1, 2, 2, 2, 1))), "dim4")


@pytest.mark.parametrize("variant", ["3d-3way", "4d-3way"])
def test_zeroed_qkv_reduces_ftm_to_residual_map(variant):
    cfg = tiny(**dict(zip(("fusion_strategy", "ftm_placement"), VARIANTS[variant])))
    m = MFFormer(cfg, rng=np.random.default_rng(1))
    for ftm in m.ftms:
        for w in (ftm.w_q, ftm.w_k, ftm.w_v):
            w.data[:] = 0.0
    f, s = inputs(cfg)
    with no_grad():
        m(f, s)
    for ftm in m.ftms:
        st_ = ftm.last_state
        np.testing.assert_array_equal(st_.attended.tokens.data, st_.tokens.tokens.data)
        fo, so = ftm_restore(align_and_stack(st_.fmri, st_.t1w, cfg.fusion_strategy), st_.fmri, st_.t1w,
                             cfg.fusion_strategy)
        np.testing.assert_array_equal(st_.fmri_out.data, fo.data)
        np.testing.assert_array_equal(st_.t1w_out.data, so.data)


# --- head -----------------------------------------------------------------------------

def test_head_flatten_arithmetic():
    m = MFFormer(ModelConfig.for_variant("4d-3way"))
    assert m.fmri_spatial[-1] == (3, 31) and m.t1w_spatial[-1] == (8, 8, 5)
    m = MFFormer(ModelConfig(t1w_shape=(32, 32, 32)))
    assert m.head.flat_features == 256 * 3 * 31 == 23808
    assert [l.weight.shape for l in m.head.mlp.layers] == [(20, 23808), (20, 20), (2, 20)]


def test_head_fuse_identity_pool(rng):
    head = MFFormer(tiny()).head
    f = Tensor(rng.normal(size=(2, 32, 1, 1)))
    s = Tensor(rng.normal(size=(2, 32, 1, 1, 1)))
    fused = head.fuse(f, s).data
    np.testing.assert_array_equal(fused[:, 32:], s.data[..., 0])


def test_head_upsamples_small_volume_features(rng):
    head = MFFormer(ModelConfig(t1w_shape=(32, 32, 32), base_channels=1, attention_dim=4)).head
    s = Tensor(rng.normal(size=(1, 16, 1, 1, 1)))
    fused = head.fuse(Tensor(rng.normal(size=(1, 16, 3, 31))), s)
    assert fused.shape == (1, 32, 3, 31)
    np.testing.assert_allclose(fused.data[0, 16:], np.broadcast_to(s.data[0, :, :, :, 0], (16, 3, 31)))


# --- full forward -----------------------------------------------------------------------

@pytest.mark.parametrize("variant", list(VARIANTS))
def test_every_variant_yields_binary_logits(variant):
    cfg = ModelConfig.for_variant(variant, fmri_shape=(32, 32), t1w_shape=(16, 16, 16), base_channels=2,
                                  attention_dim=8)
    m = MFFormer(cfg)
    assert len(m.ftms) == {"last1": 1, "last3": 3}[cfg.ftm_placement] * cfg.fused
    f, s = inputs(cfg, batch=2)
    assert m(f, s).shape == (2, 2)


def test_fmri_baseline_has_no_3d_convolution():
    cfg = tiny(fusion_strategy="none_fmri")
    m = MFFormer(cfg)
    assert not m.uses_conv3d() and not m.t1w_stages
    f, s = inputs(cfg, batch=2)
    out = m(f, None)
    convs = [shapes for op, shapes in graph_ops(out) if op == "conv_nd"]
    assert convs and all(len(shapes[1]) == 4 for shapes in convs)
    assert all(len(shape) <= 4 for _, shapes in graph_ops(out) for shape in shapes)


def test_four_d_three_way_has_three_independent_ftms():
    m = MFFormer(tiny())
    assert m.ftm_at == [2, 3, 4] and len(m.ftms) == 3
    ids = {id(ftm.w_q) for ftm in m.ftms}
    assert len(ids) == 3


def test_duplicated_subjects_give_duplicated_logits():
    cfg = tiny()
    m = MFFormer(cfg).eval()
    f, s = inputs(cfg, batch=2)
    fd = Tensor(np.concatenate([f.data, f.data[:1]]))
    sd = Tensor(np.concatenate([s.data, s.data[:1]]))
    with no_grad():
        out = m(fd, sd).data
    np.testing.assert_array_equal(out[0], out[2])


def test_inference_is_batch_independent():
    cfg = tiny()
    m = MFFormer(cfg).eval()
    f, s = inputs(cfg, batch=4)
    with no_grad():
        full = m(f, s).data
        one = m(Tensor(f.data[1:2]), Tensor(s.data[1:2])).data
    np.testing.assert_allclose(one[0], full[1], rtol=1e-12, atol=1e-14)


def test_input_shape_checked():
    m = MFFormer(tiny())
    f, s = inputs(m.config)
    with pytest.raises(ValueError, match="T1w"):
        m(f, Tensor(np.zeros((3, 1, 16, 16, 8))))
    with pytest.raises(ValueError, match="fMRI"):
        m(None, s)


VOXEL_BUDGET = 2**18  # keeps the volume branch within memory


@st.composite
def volume_shapes(draw):
    a = draw(st.integers(32, 128))
    b = draw(st.integers(32, min(128, VOXEL_BUDGET // (a * 32))))
    c = draw(st.integers(32, min(128, VOXEL_BUDGET // (a * b))))
    return tuple(draw(st.permutations([a, b, c])))


@settings(max_examples=6, deadline=None)
@given(st.tuples(*[st.integers(32, 128)] * 2), volume_shapes(), st.sampled_from(list(VARIANTS)))
def test_shape_closure_fuzz(fs, ss, variant):
    cfg = ModelConfig.for_variant(variant, fmri_shape=fs, t1w_shape=ss, base_channels=1, attention_dim=4)
    m = MFFormer(cfg).eval()
    f, s = inputs(cfg, batch=2)
    with no_grad():
        assert m(f, s).shape == (2, 2)


def test_float32_mode_keeps_dtype():
    cfg = tiny(dtype="float32")
    m = MFFormer(cfg)
    f, s = inputs(cfg)
    out = m(Tensor(f.data, dtype=np.float32), Tensor(s.data, dtype=np.float32))
    assert out.dtype == np.float32
    nn.cross_entropy(out, [0, 1, 0]).backward()
    assert {p.grad.dtype for p in m.parameters()} == {np.dtype(np.float32)}


# --- end-to-end gradient -----------------------------------------------------------------

@pytest.mark.parametrize("variant", list(VARIANTS))
def test_full_model_gradient_check(variant):
    cfg = ModelConfig.for_variant(variant, fmri_shape=(32, 32), t1w_shape=(16, 16, 16), base_channels=2,
                                  attention_dim=8)
    m = MFFormer(cfg, rng=np.random.default_rng(3))
    f, s = inputs(cfg, batch=3, seed=4)
    w = np.random.default_rng(5).normal(size=(3, 2))
    params = m.parameters()
    start = time.time()
    # floor 1e-6: parameters whose true gradient vanishes (shifts cancelled by a later batchnorm) get
    # ~1e-10 of cancellation noise from the difference quotient; batchnorm over 3 values at the 1x1x1
    # stages is curved enough that the plain O(h^2) quotient drifts, hence the extrapolated one
    res = gradcheck_report(lambda: reduce_sum(m(f, s) * Tensor(w)), params, max_entries=4,
                           rng=np.random.default_rng(6), floor=1e-6, skip_kinks=True, richardson=True)
    assert res.max_error < 1e-3
    assert res.n_checked >= 0.75 * (res.n_checked + res.n_skipped)
    assert time.time() - start < 120


def test_bias_before_batchnorm_has_zero_gradient():
    cfg = tiny()
    m = MFFormer(cfg, rng=np.random.default_rng(3))
    f, s = inputs(cfg)
    reduce_sum(m(f, s) * Tensor(np.random.default_rng(5).normal(size=(3, 2)))).backward()
    scale = max(np.abs(p.grad).max() for p in m.parameters())
    for block in m.fmri_stages + m.t1w_stages + m.head.convs:
        assert np.abs(block.conv.bias.grad).max() < 1e-12 * max(scale, 1.0)
