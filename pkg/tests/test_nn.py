import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m2fedaqi import nn
from m2fedaqi.errors import CodecError, ConfigError, DimensionError, StructureError
from m2fedaqi.rng import stream


def _rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def _numeric_grad(f, x, h=1e-3):
    """Central differences of the scalar function ``f`` at float64 array ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


# --- linear -----------------------------------------------------------------


def test_linear_identity():
    layer = nn.LinearLayer(np.eye(2, dtype=np.float32), np.zeros(2, np.float32))
    out = nn.linear_forward(layer, np.array([[3, -1]], np.float32))
    np.testing.assert_array_equal(out, [[3, -1]])


def test_linear_hand_arithmetic():
    layer = nn.LinearLayer(np.array([[1, 1], [1, -1]], np.float32), np.array([0.5, 0], np.float32))
    out = nn.linear_forward(layer, np.array([[2, 1]], np.float32))
    np.testing.assert_allclose(out, [[3.5, 1.0]])


def test_linear_shape_mismatch_names_shapes():
    layer = nn.LinearLayer(np.zeros((3, 4), np.float32), np.zeros(3, np.float32))
    with pytest.raises(DimensionError, match=r"\(2, 5\).*4"):
        nn.linear_forward(layer, np.zeros((2, 5), np.float32))


def test_linear_weight_bias_disagree():
    with pytest.raises(DimensionError):
        nn.LinearLayer(np.zeros((3, 4), np.float32), np.zeros(4, np.float32))


@settings(max_examples=25, deadline=None)
@given(batch=st.integers(1, 4), d_in=st.integers(1, 8), d_out=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_linear_backward_matches_finite_differences(batch, d_in, d_out, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(d_out, d_in)).astype(np.float32)
    b = rng.normal(size=d_out).astype(np.float32)
    x = rng.normal(size=(batch, d_in)).astype(np.float32)
    r = rng.normal(size=(batch, d_out))
    layer = nn.LinearLayer(w, b)
    dx, dw, db = nn.linear_backward(layer, x, r.astype(np.float32))

    w64, b64, x64 = w.astype(np.float64), b.astype(np.float64), x.astype(np.float64)
    f = lambda: float(np.sum(nn.linear_forward(nn.LinearLayer(w64, b64), x64) * r))  # noqa: E731
    assert _rel_err(dx, _numeric_grad(f, x64)) < 1e-3
    assert _rel_err(dw, _numeric_grad(f, w64)) < 1e-3
    assert _rel_err(db, _numeric_grad(f, b64)) < 1e-3


# --- layer norm --------------------------------------------------------------


def _ln(d, dtype=np.float32):
    return nn.LayerNormLayer(np.ones(d, dtype), np.zeros(d, dtype))


def test_layer_norm_symmetric_row():
    out, _ = nn.layer_norm_forward(_ln(2), np.array([[1, -1]], np.float32))
    expected = 1 / np.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out, [[expected, -expected]], rtol=1e-6)


def test_layer_norm_constant_row_is_zero():
    out, _ = nn.layer_norm_forward(_ln(3), np.array([[5, 5, 5]], np.float32))
    np.testing.assert_array_equal(out, [[0, 0, 0]])


def test_layer_norm_uses_population_variance():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    out, _ = nn.layer_norm_forward(_ln(4, np.float64), x)
    var = np.mean((x - x.mean()) ** 2)
    np.testing.assert_allclose(out, (x - x.mean()) / np.sqrt(var + 1e-5))


def test_layer_norm_rejects_bad_epsilon():
    with pytest.raises(ConfigError):
        nn.LayerNormLayer(np.ones(2), np.zeros(2), epsilon=0.0)


def _layer_norm_case(batch, d, seed, dtype):
    rng = np.random.default_rng(seed)
    gain = rng.normal(size=d)
    shift = rng.normal(size=d)
    x = rng.normal(size=(batch, d)) * 2
    r = rng.normal(size=(batch, d))
    layer = nn.LayerNormLayer(gain.astype(dtype), shift.astype(dtype))
    _, cache = nn.layer_norm_forward(layer, x.astype(dtype))
    analytic = nn.layer_norm_backward(layer, cache, r.astype(dtype))

    layer64 = nn.LayerNormLayer(gain, shift)
    f = lambda: float(np.sum(nn.layer_norm_forward(layer64, x)[0] * r))  # noqa: E731
    numeric = (_numeric_grad(f, x), _numeric_grad(f, gain), _numeric_grad(f, shift))
    return [_rel_err(a, n) for a, n in zip(analytic, numeric)]


@settings(max_examples=25, deadline=None)
@given(batch=st.integers(1, 4), d=st.integers(3, 8), seed=st.integers(0, 10**6))
def test_layer_norm_backward_matches_finite_differences(batch, d, seed):
    assert max(_layer_norm_case(batch, d, seed, np.float32)) < 1e-3


@settings(max_examples=25, deadline=None)
@given(batch=st.integers(1, 4), d=st.integers(2, 8), seed=st.integers(0, 10**6))
def test_layer_norm_backward_derivation_float64(batch, d, seed):
    # At d=2 a normalized row is +-1 whatever the input, so the true input
    # gradient is of order epsilon and float32 cancellation dominates it; the
    # derivation itself is checked here in float64 for every width.
    assert max(_layer_norm_case(batch, d, seed, np.float64)) < 1e-3


# --- relu / dropout -----------------------------------------------------------


def test_relu():
    np.testing.assert_array_equal(nn.relu_forward(np.array([-2.0, 0.0, 3.0])), [0, 0, 3])
    np.testing.assert_array_equal(nn.relu_backward(np.array([-2.0, 0.0, 3.0]), np.ones(3)), [0, 0, 1])


def test_dropout_eval_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
    out, mask = nn.dropout_forward(x, 0.2, train=False)
    assert mask is None and out.tobytes() == x.tobytes()


def test_dropout_p_zero_train_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
    out, _ = nn.dropout_forward(x, 0.0, train=True, rng=stream(0, "d"))
    assert out.tobytes() == x.tobytes()


@pytest.mark.parametrize("p", [-0.1, 1.0, 1.5])
def test_dropout_rate_validated(p):
    with pytest.raises(ConfigError):
        nn.dropout_forward(np.ones(3, np.float32), p, train=False)


def test_dropout_statistics():
    x = np.ones(10**6, np.float32)
    out, _ = nn.dropout_forward(x, 0.2, train=True, rng=stream(3, "dropout-stats"))
    assert abs(out.mean() - 1.0) < 0.01
    assert abs(np.mean(out == 0) - 0.2) < 0.01
    np.testing.assert_allclose(out[out != 0], 1 / 0.8, rtol=1e-6)


def test_dropout_backward_uses_same_mask():
    x = np.ones((3, 4), np.float32)
    out, mask = nn.dropout_forward(x, 0.5, train=True, rng=stream(1, "d"))
    np.testing.assert_array_equal(nn.dropout_backward(mask, np.ones_like(x)), out)


# --- parameter containers ------------------------------------------------------


def _params(seed=0):
    rng = np.random.default_rng(seed)
    return nn.ParameterSet([("a", rng.normal(size=(3, 2))), ("b", rng.normal(size=4)), ("c", rng.normal(size=(1, 1, 2)))])


def test_layout_offsets_contiguous():
    lay = _params().layout
    assert [e.offset for e in lay] == [0, 6, 10]
    assert lay.total == 12


def test_flatten_restore_round_trip_bit_exact():
    p = _params()
    q = nn.restore_params(p.layout, nn.flatten_params(p))
    assert p.equal(q)


def test_empty_parameter_set_round_trip():
    p = nn.ParameterSet()
    vec = nn.flatten_params(p)
    assert vec.shape == (0,)
    assert len(nn.restore_params(p.layout, vec)) == 0


def test_restore_short_vector_names_lengths():
    p = _params()
    with pytest.raises(CodecError, match="expected 12, got 11"):
        nn.restore_params(p.layout, nn.flatten_params(p)[:-1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.integers(1, 5), min_size=0, max_size=3), min_size=0, max_size=5), st.integers(0, 2**32 - 1))
def test_flatten_restore_bijection_property(shapes, seed):
    rng = np.random.default_rng(seed)
    p = nn.ParameterSet((f"p{i}", rng.normal(size=s)) for i, s in enumerate(shapes))
    vec = nn.flatten_params(p)
    assert nn.restore_params(p.layout, vec).equal(p)
    assert np.array_equal(nn.flatten_params(nn.restore_params(p.layout, vec)), vec)


def test_wire_form_round_trip():
    p = _params(4)
    blob = nn.params_to_bytes(p)
    assert nn.params_from_bytes(blob).equal(p)
    with pytest.raises(CodecError, match="expected 48 bytes, got 47"):
        nn.params_from_bytes(blob[:-1])


def test_duplicate_or_misshapen_assignment_rejected():
    with pytest.raises(StructureError):
        nn.ParameterSet([("a", np.zeros(2)), ("a", np.zeros(2))])
    p = _params()
    with pytest.raises(StructureError):
        p["a"] = np.zeros(3)


# --- optimizers ------------------------------------------------------------------


def test_sgd_step_example():
    p = nn.ParameterSet([("w", np.array([1.0]))])
    g = nn.ParameterSet([("w", np.array([0.5]))])
    np.testing.assert_allclose(nn.sgd_step(p, g, 0.1)["w"], [0.95], rtol=1e-7)


def test_sgd_zero_gradient_is_identity():
    p = _params()
    assert nn.sgd_step(p, p.zeros_like(), 0.1).equal(p)


def test_sgd_linearity_for_constant_gradients():
    p = _params(1)
    g1, g2 = _params(2), _params(3)
    two = nn.sgd_step(nn.sgd_step(p, g1, 0.01), g2, 0.01)
    summed = nn.ParameterSet((k, g1[k] + g2[k]) for k in g1)
    one = nn.sgd_step(p, summed, 0.01)
    assert two.allclose(one, atol=1e-6)


def test_sgd_layout_mismatch():
    with pytest.raises(StructureError):
        nn.sgd_step(_params(), nn.ParameterSet([("a", np.zeros((3, 2)))]), 0.1)


def test_adam_first_step_moves_by_lr():
    # With bias correction the first Adam step is lr * sign(g) (up to eps).
    p = nn.ParameterSet([("w", np.array([1.0, -1.0, 2.0]))])
    g = nn.ParameterSet([("w", np.array([0.3, -4.0, 1e-3]))])
    out = nn.Adam(0.01).step(p, g)
    np.testing.assert_allclose(out["w"], p["w"] - 0.01 * np.sign(g["w"]), atol=1e-6)


def test_unknown_optimizer():
    with pytest.raises(ConfigError):
        nn.make_optimizer("rmsprop", 0.1)


def test_optimizer_determinism():
    def run():
        opt = nn.make_optimizer("adam", 1e-3)
        p = _params()
        for i in range(5):
            p = opt.step(p, _params(10 + i))
        return p

    assert run().equal(run())


def test_layers_finite_for_bounded_inputs():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1e3, 1e3, size=(4, 8)).astype(np.float32)
    lin = nn.LinearLayer(*nn.init_linear(stream(0, "fin"), 8, 8))
    h = nn.linear_forward(lin, x)
    ln = _ln(8)
    y, cache = nn.layer_norm_forward(ln, h)
    dx, _, _ = nn.layer_norm_backward(ln, cache, np.ones_like(y))
    dlin, dw, db = nn.linear_backward(lin, x, dx)
    for a in (h, y, dx, dlin, dw, db):
        assert np.isfinite(a).all()


def test_init_linear_bounds_and_zero_bias():
    w, b = nn.init_linear(stream(0, "init"), 16, 32)
    assert w.shape == (32, 16) and w.dtype == np.float32
    assert np.abs(w).max() <= 0.25
    assert not b.any()
