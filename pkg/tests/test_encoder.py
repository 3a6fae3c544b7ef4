import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swl import encoder as enc
from swl import geom
from swl import numcore as nc
from swl import tokens as tk
from swl.tokens import Modality


def token_set(rng, counts, d=8, B=1):
    n = sum(counts.values())
    sem = nc.Tensor(rng.normal(size=(B, n, d)))
    pos = geom.normalize(rng.normal(size=(B, n, 3)))
    return tk.TokenSet(sem, pos, {Modality(m): k for m, k in counts.items()})


def params_for(cfg, seed=0):
    return enc.init_encoder(cfg, np.random.default_rng(seed))


def randomize(params, rng, scale=0.5):
    for p in params.values():
        p.data = rng.normal(size=p.shape) * scale + (1.0 if p.name and p.name.endswith(".g") else 0.0)
    return params


MIXED = {0: 3, 1: 4, 2: 2, 3: 2}


# --- spatial bias -----------------------------------------------------------------------------


def test_equal_positions_give_constant_bias():
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = params_for(cfg)
    pos = np.tile(geom.normalize([1.0, 2, 3]), (1, 5, 1))
    P = enc.spatial_bias(geom.pairwise_rotation_features(pos), p, "enc.0").data
    assert np.ptp(P) <= 1e-15  # identical rows; BLAS may round lanes differently


def test_zero_spatial_weights_give_bias_constant():
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = params_for(cfg)
    p["enc.0.sp1.W"].data[:] = 0
    p["enc.0.sp2.W"].data[:] = 0
    p["enc.0.sp2.b"].data[:] = 0.37
    pos = geom.normalize(np.random.default_rng(0).normal(size=(1, 6, 3)))
    P = enc.spatial_bias(geom.pairwise_rotation_features(pos), p, "enc.0").data
    np.testing.assert_array_equal(P, 0.37)


def test_spatial_bias_is_not_forced_symmetric():
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = randomize(params_for(cfg), np.random.default_rng(1))
    pos = geom.normalize(np.random.default_rng(2).normal(size=(1, 6, 3)))
    P = enc.spatial_bias(geom.pairwise_rotation_features(pos), p, "enc.0").data[0]
    assert not np.allclose(P, P.T)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_global_rotation_preserves_invariant_parts_of_the_feature(seed):
    rng = np.random.default_rng(seed)
    p = geom.normalize(rng.normal(size=(7, 3)))
    q = geom.random_quat(rng)
    f0 = geom.pairwise_rotation_features(p)
    f1 = geom.pairwise_rotation_features(geom.quat_rotate(q, p))
    np.testing.assert_allclose(f1[..., 0], f0[..., 0], atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(f1[..., 1:], axis=-1), np.linalg.norm(f0[..., 1:], axis=-1),
                               atol=1e-12)
    np.testing.assert_allclose(f1[..., 1:], geom.quat_rotate(q, f0[..., 1:]), atol=1e-12)


# --- modality layer norm -----------------------------------------------------------------------


def test_modality_layer_norm_statistics():
    rng = np.random.default_rng(3)
    cfg = enc.EncoderConfig(layers=1, d=16, heads=4)
    t = token_set(rng, MIXED, d=16, B=2)
    y = enc.modality_layer_norm(t.semantics, t, params_for(cfg), "enc.0").data
    for m, a, b in t.segments():
        blk = y[:, a:b]
        assert np.abs(blk.mean(-1)).max() <= 1e-9
        assert np.abs(blk.var(-1) - 1).max() <= 1e-6


def test_modality_gains_are_separate():
    rng = np.random.default_rng(4)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = params_for(cfg)
    p["enc.0.ln.audio.g"].data[:] = 3.0
    row = rng.normal(size=8)
    t = tk.TokenSet(nc.Tensor(np.tile(row, (1, 2, 1))), np.tile(geom.FORWARD, (1, 2, 1)),
                    {Modality.CLS: 1, Modality.AUDIO: 1})
    y = enc.modality_layer_norm(t.semantics, t, p, "enc.0").data[0]
    np.testing.assert_allclose(y[1], 3 * y[0], atol=1e-14)


def test_single_modality_reduces_to_plain_layer_norm():
    rng = np.random.default_rng(5)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = randomize(params_for(cfg), rng)
    t = token_set(rng, {1: 5})
    y = enc.modality_layer_norm(t.semantics, t, p, "enc.0").data
    x = t.semantics.data
    xh = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + nc.LN_EPS)
    np.testing.assert_allclose(y, xh * p["enc.0.ln.audio.g"].data + p["enc.0.ln.audio.b"].data, atol=1e-13)


def test_missing_layer_norm_parameters():
    rng = np.random.default_rng(6)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = params_for(cfg)
    del p["enc.0.ln.visual.g"]
    t = token_set(rng, {0: 2, 2: 2})
    with pytest.raises(KeyError):
        enc.modality_layer_norm(t.semantics, t, p, "enc.0")


# --- attention --------------------------------------------------------------------------------


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def attention_oracle(x, P, tags, p, prefix, heads, modality_wise, spatial):
    """Per-token projections and per-head attention, written with plain loops."""
    N, d = x.shape
    dh = d // heads
    names = tk.MODALITY_NAMES
    qkv = np.zeros((N, 3 * d))
    for i in range(N):
        g = names[Modality(tags[i])] if modality_wise else "shared"
        qkv[i] = x[i] @ p[f"{prefix}.qkv.{g}.W"].data + p[f"{prefix}.qkv.{g}.b"].data
    out = np.zeros((N, d))
    rows = []
    for h in range(heads):
        q = qkv[:, h * dh:(h + 1) * dh]
        k = qkv[:, d + h * dh:d + (h + 1) * dh]
        v = qkv[:, 2 * d + h * dh:2 * d + (h + 1) * dh]
        A = softmax(q @ k.T / np.sqrt(dh))
        if spatial:
            A = 0.5 * (A + softmax(P))
        rows.append(A)
        out[:, h * dh:(h + 1) * dh] = A @ v
    return out @ p[f"{prefix}.out.W"].data + p[f"{prefix}.out.b"].data, rows


@pytest.mark.parametrize("modality_wise,spatial", [(True, True), (False, True), (True, False)])
def test_blended_attention_matches_oracle(modality_wise, spatial):
    rng = np.random.default_rng(7)
    cfg = enc.EncoderConfig(layers=1, d=12, heads=3, use_modality_qkv=modality_wise, use_spatial_bias=spatial)
    p = randomize(params_for(cfg), rng)
    t = token_set(rng, MIXED, d=12)
    P = nc.Tensor(rng.normal(size=(1, t.n, t.n))) if spatial else None
    keep = []
    y = enc.blended_attention(t.semantics, P, t, cfg, p, "enc.0", keep).data[0]
    want, rows = attention_oracle(t.semantics.data[0], None if P is None else P.data[0], t.tags, p, "enc.0",
                                  3, modality_wise, spatial)
    np.testing.assert_allclose(y, want, atol=1e-12)
    for h in range(3):
        np.testing.assert_allclose(keep[0][0, h], rows[h], atol=1e-14)


def test_single_token_attention_is_output_of_value():
    rng = np.random.default_rng(8)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = randomize(params_for(cfg), rng)
    t = token_set(rng, {0: 1})
    keep = []
    y = enc.blended_attention(t.semantics, nc.Tensor(rng.normal(size=(1, 1, 1))), t, cfg, p, "enc.0", keep)
    np.testing.assert_array_equal(keep[0], 1.0)
    v = (t.semantics.data[0] @ p["enc.0.qkv.cls.W"].data + p["enc.0.qkv.cls.b"].data)[:, 16:]
    np.testing.assert_allclose(y.data[0], v @ p["enc.0.out.W"].data + p["enc.0.out.b"].data, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), spatial=st.booleans())
def test_attention_rows_sum_to_one_in_every_layer_and_head(seed, spatial):
    rng = np.random.default_rng(seed)
    cfg = enc.EncoderConfig(layers=2, d=8, heads=4, use_spatial_bias=spatial)
    p = randomize(params_for(cfg), rng, scale=2.0)
    keep = []
    enc.encode(token_set(rng, MIXED, B=2), cfg, p, keep=keep)
    assert len(keep) == 2
    for a in keep:
        assert a.shape == (2, 4, 11, 11)
        assert np.abs(a.sum(-1) - 1).max() <= 1e-9


def test_heads_must_divide_width():
    with pytest.raises(ValueError):
        enc.EncoderConfig(d=10, heads=4)


# --- blocks and full encoder --------------------------------------------------------------------


def test_zero_attention_and_mlp_weights_leave_residual():
    rng = np.random.default_rng(9)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = randomize(params_for(cfg), rng)
    for k in ("enc.0.out.W", "enc.0.out.b", "enc.0.mlp2.shared.W", "enc.0.mlp2.shared.b"):
        p[k].data[:] = 0
    t = token_set(rng, MIXED)
    out = enc.encode(t, cfg, p).semantics.data
    np.testing.assert_array_equal(out, t.semantics.data)


def test_block_matches_literal_update():
    rng = np.random.default_rng(10)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2)
    p = randomize(params_for(cfg), rng)
    t = token_set(rng, MIXED)
    feats = geom.pairwise_rotation_features(t.positions)
    P = enc.spatial_bias(feats, p, "enc.0")
    xbar = enc.blended_attention(enc.modality_layer_norm(t.semantics, t, p, "enc.0"), P, t, cfg, p, "enc.0").data
    h = nc.gelu(xbar @ p["enc.0.mlp1.shared.W"].data + p["enc.0.mlp1.shared.b"].data).data
    want = t.semantics.data + xbar + h @ p["enc.0.mlp2.shared.W"].data + p["enc.0.mlp2.shared.b"].data
    got = enc.encoder_block(t.semantics, feats, t, cfg, p, "enc.0").data
    np.testing.assert_allclose(got, want, atol=1e-13)


def test_block_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    cfg = enc.EncoderConfig(layers=1, d=8, heads=2, use_modality_mlp=True)
    p = randomize(params_for(cfg), rng)
    t = token_set(rng, MIXED)
    x = nc.parameter(t.semantics.data)
    feats = geom.pairwise_rotation_features(t.positions)
    r = rng.uniform(0.5, 1.5, size=x.shape)

    def loss():
        return nc.total(nc.mul(enc.encoder_block(x, feats, t, cfg, p, "enc.0"), r))

    # softmax(P + c) = softmax(P): the spatial output bias has an exactly zero gradient
    inert = {"enc.0.sp2.b"}
    checked = {k: v for k, v in dict(p, x=x).items() if k not in inert}
    assert nc.finite_diff_check(loss, checked, eps=1e-5, max_entries=20) <= 1e-4
    g = nc.gradients(loss(), p)["enc.0.sp2.b"]
    assert np.abs(g).max() <= 1e-14


def test_same_modality_permutation_is_equivariant():
    rng = np.random.default_rng(12)
    cfg = enc.EncoderConfig(layers=2, d=8, heads=2)
    p = randomize(params_for(cfg), rng)
    t = token_set(rng, MIXED)
    perm = np.arange(t.n)
    perm[[3, 5]] = perm[[5, 3]]  # two audio tokens
    t2 = tk.TokenSet(nc.Tensor(t.semantics.data[:, perm]), t.positions[:, perm], t.counts)
    a = enc.encode(t, cfg, p).semantics.data
    b = enc.encode(t2, cfg, p).semantics.data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_zero_layers_is_identity():
    rng = np.random.default_rng(13)
    cfg = enc.EncoderConfig(layers=0, d=8, heads=2)
    t = token_set(rng, MIXED)
    out = enc.encode(t, cfg, params_for(cfg))
    assert out.semantics.data.tobytes() == t.semantics.data.tobytes()


def test_cls_only_runs_and_positions_pass_through():
    rng = np.random.default_rng(14)
    cfg = enc.EncoderConfig(layers=2, d=8, heads=2)
    t = token_set(rng, {0: 50})
    out = enc.encode(t, cfg, params_for(cfg))
    assert np.isfinite(enc.cls_outputs(out).data).all()
    assert out.positions is t.positions and out.counts == t.counts


def test_encode_is_deterministic_on_87_tokens():
    cfg = enc.EncoderConfig(layers=2, d=32, heads=4)

    def run():
        rng = np.random.default_rng(15)
        t = token_set(rng, {0: 50, 1: 15, 2: 16, 3: 6}, d=32)
        return enc.encode(t, cfg, params_for(cfg, 3)).semantics.data.tobytes()

    assert run() == run()


def test_width_mismatch():
    rng = np.random.default_rng(16)
    cfg = enc.EncoderConfig(layers=1, d=16, heads=2)
    with pytest.raises(nc.ShapeError):
        enc.encode(token_set(rng, {0: 2}), cfg, params_for(cfg))


def test_ablation_variants_are_config_flags():
    def names(**kw):
        return set(params_for(enc.EncoderConfig(layers=1, d=8, heads=2, **kw)))

    full = names()
    assert {"enc.0.ln.audio.g", "enc.0.qkv.visual.W", "enc.0.sp1.W"} <= full
    no_rot = names(use_spatial_bias=False)
    assert not any(".sp" in n for n in no_rot)
    no_mops = names(use_modality_ln=False, use_modality_qkv=False)
    assert "enc.0.ln.shared.g" in no_mops and "enc.0.qkv.shared.W" in no_mops
    ln_only = names(use_modality_qkv=False)
    assert "enc.0.ln.cls.g" in ln_only and "enc.0.qkv.shared.W" in ln_only
    m_mlp = names(use_modality_mlp=True)
    assert "enc.0.mlp1.behavior.W" in m_mlp
    rng = np.random.default_rng(17)
    t = token_set(rng, MIXED)
    for kw in ({}, dict(use_spatial_bias=False), dict(use_modality_ln=False, use_modality_qkv=False),
               dict(use_modality_qkv=False), dict(use_modality_mlp=True)):
        cfg = enc.EncoderConfig(layers=1, d=8, heads=2, **kw)
        assert np.isfinite(enc.encode(t, cfg, params_for(cfg)).semantics.data).all()
