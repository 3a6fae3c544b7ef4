import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swl import numcore as nc


def weighted(t, seed=0):
    """Scalar loss sum(t * R) with a fixed positive R, so no gradient entry is trivially zero."""
    r = np.random.default_rng(seed).uniform(0.5, 1.5, size=t.shape)
    return nc.total(nc.mul(t, r))


def away_from_zero(rng, shape):
    # relative error is only meaningful when gradients dwarf the ~1e-11 rounding floor
    return rng.uniform(0.5, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def check(build, params, tol=1e-6):
    err = nc.finite_diff_check(build, params, eps=1e-5)
    assert err <= tol, err


# --- forward examples ---------------------------------------------------------


def test_matmul_identity_padded():
    a = np.arange(6.0).reshape(2, 3)
    eye = np.zeros((3, 2))
    eye[0, 0] = eye[1, 1] = 1
    np.testing.assert_array_equal(nc.matmul(a, eye).data, a[:, :2])


def test_softmax_symmetric_pair():
    np.testing.assert_array_equal(nc.softmax(np.zeros(2)).data, [0.5, 0.5])


def test_gelu_zero_and_exact_erf_form():
    assert nc.gelu(np.array([0.0])).data[0] == 0.0
    x = np.linspace(-4, 4, 17)
    ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(nc.gelu(x).data, ref, rtol=0, atol=1e-15)


def test_shape_mismatch_is_structured_error():
    with pytest.raises(nc.ShapeError, match="matmul"):
        nc.matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(nc.ShapeError, match="add"):
        nc.add(np.zeros((2, 3)), np.zeros((4,)))


def test_non_finite_output_is_checked():
    with pytest.raises(nc.NumericError, match="matmul"):
        nc.matmul(np.array([[1e200]]), np.array([[1e200]]))


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x, w = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    a = nc.gelu(nc.matmul(x, w)).data
    b = nc.gelu(nc.matmul(x, w)).data
    assert a.tobytes() == b.tobytes()


# --- backward examples --------------------------------------------------------


def test_square_gradient():
    x = nc.parameter(np.array(3.0))
    g = nc.gradients(nc.mul(x, x), {"x": x})
    assert g["x"] == 6.0


def test_sum_of_softmax_has_zero_gradient():
    v = nc.parameter(np.random.default_rng(0).normal(size=5))
    g = nc.gradients(nc.total(nc.softmax(v)), {"v": v})["v"]
    np.testing.assert_allclose(g, 0, atol=1e-15)


def test_backward_needs_scalar():
    x = nc.parameter(np.ones(3))
    with pytest.raises(nc.ShapeError):
        nc.backward(nc.scale(x, 2.0))


def test_unreached_parameter_gets_zero_gradient():
    x, y = nc.parameter(np.ones(2)), nc.parameter(np.ones((2, 2)))
    g = nc.gradients(nc.total(x), {"x": x, "y": y})
    assert g["y"].shape == (2, 2) and not g["y"].any()


def test_two_layer_mlp_matches_central_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 5))
    p = {"w1": nc.parameter(rng.normal(size=(5, 8))), "b1": nc.parameter(rng.normal(size=8)),
         "w2": nc.parameter(rng.normal(size=(8, 3))), "b2": nc.parameter(rng.normal(size=3))}

    def loss():
        h = nc.gelu(nc.linear(x, p["w1"], p["b1"]))
        return weighted(nc.linear(h, p["w2"], p["b2"]))

    check(loss, p)


# --- per-primitive gradient checks --------------------------------------------

dims = st.integers(1, 8)


@settings(max_examples=15, deadline=None)
@given(m=dims, n=dims, k=dims, seed=st.integers(0, 10**6))
def test_matmul_gradient(m, n, k, seed):
    rng = np.random.default_rng(seed)
    a, b = nc.parameter(away_from_zero(rng, (m, k))), nc.parameter(away_from_zero(rng, (k, n)))
    check(lambda: weighted(nc.matmul(a, b), seed), {"a": a, "b": b})


@settings(max_examples=15, deadline=None)
@given(m=dims, n=dims, seed=st.integers(0, 10**6))
def test_elementwise_gradients(m, n, seed):
    rng = np.random.default_rng(seed)
    a, b = nc.parameter(away_from_zero(rng, (m, n))), nc.parameter(away_from_zero(rng, n))
    check(lambda: weighted(nc.add(nc.mul(a, b), nc.scale(a, -0.7)), seed), {"a": a, "b": b})
    check(lambda: weighted(nc.sigmoid(a), seed), {"a": a})
    check(lambda: weighted(nc.gelu(a), seed), {"a": a})


@settings(max_examples=15, deadline=None)
@given(m=dims, n=st.integers(3, 8), seed=st.integers(0, 10**6))
def test_softmax_and_layer_norm_gradients(m, n, seed):
    # width 2 is excluded: the normalised pair is always ±1, so its input gradient vanishes
    rng = np.random.default_rng(seed)
    a = nc.parameter(away_from_zero(rng, (m, n)))
    g, b = nc.parameter(away_from_zero(rng, n)), nc.parameter(away_from_zero(rng, n))
    # a single output column: y_k(δ_ik - y_i) never cancels, unlike a generic weighting
    for k in (0, n - 1):
        pick = np.zeros((m, n))
        pick[:, k] = 1.0
        check(lambda: nc.total(nc.mul(nc.softmax(a), pick)), {"a": a})
    check(lambda: weighted(nc.layer_norm(a, g, b), seed), {"a": a, "g": g, "b": b})


@settings(max_examples=15, deadline=None)
@given(m=dims, n=dims, seed=st.integers(0, 10**6))
def test_shape_op_gradients(m, n, seed):
    rng = np.random.default_rng(seed)
    a, c = nc.parameter(away_from_zero(rng, (m, n))), nc.parameter(away_from_zero(rng, (2, n)))
    check(lambda: weighted(nc.transpose(a, (1, 0)), seed), {"a": a})
    check(lambda: weighted(nc.reshape(a, (n, m)), seed), {"a": a})
    check(lambda: weighted(nc.take(a, (slice(None), slice(0, max(1, n // 2)))), seed), {"a": a})
    check(lambda: weighted(nc.take(a, (np.array([0, 0, m - 1]),)), seed), {"a": a})
    check(lambda: weighted(nc.concat([a, c], axis=0), seed), {"a": a, "c": c})


@settings(max_examples=10, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), ci=st.integers(1, 3), co=st.integers(1, 3),
       circular=st.booleans(), seed=st.integers(0, 10**6))
def test_transposed_conv_gradients(h, w, ci, co, circular, seed):
    rng = np.random.default_rng(seed)
    x = nc.parameter(away_from_zero(rng, (2, ci, h, w)))
    k2 = nc.parameter(away_from_zero(rng, (ci, co, 3, 3)))
    b = nc.parameter(away_from_zero(rng, co))
    check(lambda: weighted(nc.conv_transpose2d(x, k2, b, stride=2, circular_w=circular), seed),
          {"x": x, "k": k2, "b": b})
    x1 = nc.parameter(away_from_zero(rng, (2, ci, w)))
    k1 = nc.parameter(away_from_zero(rng, (ci, co, 3)))
    check(lambda: weighted(nc.conv_transpose1d(x1, k1, b, stride=2, circular=circular), seed),
          {"x": x1, "k": k1, "b": b})


@settings(max_examples=15, deadline=None)
@given(m=dims, n=dims, seed=st.integers(0, 10**6))
def test_bce_gradient(m, n, seed):
    rng = np.random.default_rng(seed)
    z = nc.parameter(away_from_zero(rng, (m, n)) * 3)
    t = rng.uniform(size=(m, n))
    check(lambda: nc.bce_with_logits(z, t), {"z": z})


# --- transposed convolution oracle ---------------------------------------------


def conv_t_oracle(x, w, b, stride, circular):
    """Scatter every input pixel through the kernel, loop by loop; padding 1."""
    B, ci, H, W = x.shape
    _, co, kh, kw = w.shape
    Ho, Wo = H * stride, W * stride
    out = np.zeros((B, co, Ho, Wo)) + b[None, :, None, None]
    for n in range(B):
        for i in range(H):
            for j in range(W):
                for a in range(kh):
                    for c in range(kw):
                        r, col = i * stride + a - 1, j * stride + c - 1
                        if circular:
                            col %= Wo
                        if 0 <= r < Ho and 0 <= col < Wo:
                            out[n, :, r, col] += x[n, :, i, j] @ w[:, :, a, c]
    return out


@pytest.mark.parametrize("circular", [True, False])
def test_conv_transpose2d_matches_scatter_oracle(circular):
    rng = np.random.default_rng(5)
    x, w, b = rng.normal(size=(2, 3, 3, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=2)
    got = nc.conv_transpose2d(x, w, b, stride=2, circular_w=circular).data
    np.testing.assert_allclose(got, conv_t_oracle(x, w, b, 2, circular), atol=1e-12)


# --- finite-difference checker --------------------------------------------------


def test_checker_on_linear_layer_is_tight():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3))
    w = nc.parameter(rng.normal(size=(3, 2)))
    assert nc.finite_diff_check(lambda: weighted(nc.matmul(x, w)), {"w": w}, eps=1e-5) <= 1e-8


def test_checker_on_constant_loss_is_zero():
    w = nc.parameter(np.ones(3))
    assert nc.finite_diff_check(lambda: nc.Tensor(np.array(1.5)), {"w": w}, eps=1e-5) == 0.0


def test_checker_reports_wrong_gradient():
    w = nc.parameter(np.array([1.0, 2.0]))

    def bad_square(a):
        return nc._make("bad", a.data ** 2, (a,), lambda g: (g * a.data,))  # half the true gradient

    err = nc.finite_diff_check(lambda: nc.total(bad_square(w)), {"w": w}, eps=1e-5)
    assert err == pytest.approx(0.5, abs=1e-6)


def test_checker_restores_parameters():
    w = nc.parameter(np.random.default_rng(0).normal(size=(3, 3)))
    before = w.data.copy()
    nc.finite_diff_check(lambda: weighted(nc.gelu(w)), {"w": w})
    assert w.data.tobytes() == before.tobytes()


def test_checker_rejects_bad_eps():
    with pytest.raises(ValueError):
        nc.finite_diff_check(lambda: nc.Tensor(np.array(0.0)), {}, eps=0)


# --- softmax / layer norm invariants --------------------------------------------


@settings(max_examples=30, deadline=None)
@given(m=dims, n=st.integers(2, 16), scale=st.floats(0.01, 50), seed=st.integers(0, 10**6))
def test_softmax_rows_and_layer_norm_statistics(m, n, scale, seed):
    x = np.random.default_rng(seed).normal(size=(m, n)) * scale
    s = nc.softmax(x).data
    assert np.abs(s.sum(-1) - 1).max() <= 1e-12
    y = nc.layer_norm(x, np.ones(n), np.zeros(n)).data
    assert np.abs(y.mean(-1)).max() <= 1e-9
    v = x.var(-1)
    np.testing.assert_allclose(y.var(-1), v / (v + nc.LN_EPS), rtol=1e-12)
    # eps shrinks the variance by eps/var, so unit variance to 1e-6 needs var >= 1e-3
    ok = v >= 1e-3
    assert np.abs(y.var(-1)[ok] - 1).max(initial=0) <= 1e-6


# --- Adam -----------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    lr, eps = 1e-3, 1e-8
    p = {"w": nc.parameter(np.array([0.5, -2.0, 7.0]))}
    g = np.array([0.3, -4.0, 1e-3])
    st_ = nc.AdamState(lr=lr, eps=eps)
    before = p["w"].data.copy()
    nc.adam_step(st_, p, {"w": g})
    # m̂ = g and v̂ = g² after bias correction, so Δ = -lr·g / (|g| + eps)
    np.testing.assert_allclose(p["w"].data - before, -lr * g / (np.abs(g) + eps), rtol=1e-12)
    assert st_.step == 1


def test_adam_zero_gradient_keeps_parameters_and_decays_moments():
    p = {"w": nc.parameter(np.array([1.0, 2.0]))}
    s = nc.AdamState(lr=0.1)
    nc.adam_step(s, p, {"w": np.array([1.0, -1.0])})
    w1, m1, v1 = p["w"].data.copy(), s.m["w"].copy(), s.v["w"].copy()
    nc.adam_step(s, p, {"w": np.zeros(2)})
    np.testing.assert_allclose(s.m["w"], 0.9 * m1)
    np.testing.assert_allclose(s.v["w"], 0.999 * v1)
    p2 = {"w": nc.parameter(np.array([1.0, 2.0]))}
    nc.adam_step(nc.AdamState(lr=0.1), p2, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p2["w"].data, [1.0, 2.0])
    assert not np.array_equal(w1, [1.0, 2.0])


def test_adam_defaults_and_shape_check():
    s = nc.AdamState()
    assert (s.lr, s.beta1, s.beta2, s.eps) == (1e-4, 0.9, 0.999, 1e-8)
    with pytest.raises(nc.ShapeError):
        nc.adam_step(s, {"w": nc.parameter(np.ones(3))}, {"w": np.ones(2)})


def test_adam_trajectory_is_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        p = {"w": nc.parameter(rng.normal(size=(4, 3)))}
        x = rng.normal(size=(5, 4))
        s = nc.AdamState(lr=1e-2)
        for _ in range(20):
            g = nc.gradients(weighted(nc.gelu(nc.matmul(x, p["w"]))), p)
            nc.adam_step(s, p, g)
        return p["w"].data.tobytes()

    assert run() == run()


# --- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    params = {"a.W": rng.normal(size=(3, 4)), "b": rng.normal(size=7) * 1e-300, "s": np.array(np.pi),
              "t": np.array([np.nextafter(1.0, 2.0), -0.0])}
    path = tmp_path / "m.ckpt"
    nc.save_checkpoint(path, params)
    assert path.read_bytes().startswith(b"SWLCKPT v1\n")
    back = nc.load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == np.asarray(params[k], "<f8").tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        nc.load_checkpoint(p)
