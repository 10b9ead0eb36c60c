"""Engine tests: forward hand values, backward rules vs. finite differences,
Adam recurrences, and tape semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drn import autodiff as ad


def t64(arr, requires_grad=False):
    return ad.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad, dtype=np.float64)


# -- forward hand values ------------------------------------------------------


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.constant([0.0])).data[0] == pytest.approx(0.5)


def test_softmax_equal_logits():
    out = ad.softmax(ad.constant([2.5, 2.5]), axis=0)
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=1e-6)


def test_conv1d_identity_kernel():
    x = ad.constant(np.arange(12, dtype=np.float32).reshape(1, 12, 1))
    w = ad.constant(np.ones((1, 1, 1), dtype=np.float32))
    b = ad.constant(np.zeros(1, dtype=np.float32))
    out = ad.conv1d(x, w, b, stride=1, pad_left=0, pad_right=0)
    np.testing.assert_array_equal(out.data, x.data)


def test_matmul_hand_expansion():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    b = ad.constant([[5.0], [6.0]])
    np.testing.assert_allclose((a @ b).data, [[17.0], [39.0]])


def test_matmul_rejects_vectors():
    with pytest.raises(ad.ShapeError):
        ad.constant([1.0, 2.0]) @ ad.constant([[1.0], [2.0]])


def test_shape_mismatch_reported():
    with pytest.raises(ad.ShapeError):
        ad.constant(np.ones((2, 3))) @ ad.constant(np.ones((4, 2)))


def test_non_finite_forward_aborts():
    x = ad.constant(np.full((2, 2), 1000.0))
    with pytest.raises(ad.NonFiniteError, match="exp"):
        ad.exp(x)


def test_log_of_zero_aborts():
    with pytest.raises(ad.NonFiniteError):
        ad.log(ad.constant([0.0]))


# -- backward hand values -----------------------------------------------------


def test_grad_of_sum_is_ones():
    x = ad.parameter(np.arange(6, dtype=np.float32).reshape(2, 3))
    with ad.ComputationTape() as tape:
        loss = x.sum()
    grads = ad.backward(loss, tape)
    np.testing.assert_array_equal(grads[x].data, np.ones((2, 3), dtype=np.float32))


def test_grad_of_square_at_three():
    x = ad.parameter([3.0])
    with ad.ComputationTape() as tape:
        loss = (x * x).sum()
    grads = ad.backward(loss, tape)
    assert grads[x].data[0] == pytest.approx(6.0)


def test_fanout_accumulates():
    x = ad.parameter([2.0])
    with ad.ComputationTape() as tape:
        loss = (x + x).sum()
    assert ad.backward(loss, tape)[x].data[0] == pytest.approx(2.0)


def test_off_path_leaf_gets_zero_gradient():
    x = ad.parameter([1.0, 2.0])
    y = ad.parameter([3.0])
    with ad.ComputationTape() as tape:
        _unused = (y * 2.0).sum()
        loss = x.sum()
    grads = ad.backward(loss, tape)
    np.testing.assert_array_equal(grads[y].data, [0.0])


def test_backward_requires_scalar_loss():
    x = ad.parameter([1.0, 2.0])
    with ad.ComputationTape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        ad.backward(y, tape)


def test_backward_dangling_loss():
    x = ad.parameter([1.0])
    tape = ad.ComputationTape()
    loss = ad.constant([1.0])
    with pytest.raises(ad.AutodiffError):
        ad.backward(loss, tape)


def test_backward_idempotent():
    rng = np.random.default_rng(0)
    x = ad.parameter(rng.normal(size=(3, 3)).astype(np.float32))
    with ad.ComputationTape() as tape:
        loss = (ad.sigmoid(x) * x).sum()
    g1 = ad.backward(loss, tape)[x].data
    g2 = ad.backward(loss, tape)[x].data
    np.testing.assert_array_equal(g1, g2)


def test_forward_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        x = ad.parameter(rng.normal(size=(4, 4)).astype(np.float32))
        with ad.ComputationTape() as tape:
            loss = (ad.tanh(x @ x) * 0.5).sum()
        return loss.data.copy(), ad.backward(loss, tape)[x].data.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


# -- finite-difference oracle ---------------------------------------------------

RNG = np.random.default_rng(1234)


def _rand(shape, lo=-1.0, hi=1.0):
    return RNG.uniform(lo, hi, size=shape)


UNARY_CASES = [
    ("relu", lambda x: ad.relu(x), _rand((4, 4)) + 0.05),
    ("sigmoid", lambda x: ad.sigmoid(x), _rand((4, 4))),
    ("tanh", lambda x: ad.tanh(x), _rand((4, 4))),
    ("exp", lambda x: ad.exp(x), _rand((4, 4))),
    ("log", lambda x: ad.log(x), _rand((4, 4), 0.5, 2.0)),
    ("sqrt", lambda x: ad.sqrt(x), _rand((4, 4), 0.5, 2.0)),
    ("power", lambda x: ad.power(x, 3.0), _rand((4, 4), 0.5, 2.0)),
    ("softmax", lambda x: ad.softmax(x, axis=1), _rand((4, 4))),
    ("mean", lambda x: x.mean(axis=0), _rand((4, 4))),
    ("max", lambda x: x.max(axis=1), _rand((4, 4))),
    ("reshape", lambda x: x.reshape((2, 8)), _rand((4, 4))),
    ("slice", lambda x: x.slice((slice(1, 3), slice(0, 2))), _rand((4, 4))),
    ("broadcast", lambda x: ad.broadcast(x, (3, 4, 4)), _rand((4, 4))),
]


@pytest.mark.parametrize("name,fn,x0", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_gradients_match_finite_differences(name, fn, x0):
    err = ad.finite_difference_check(lambda x: fn(x).sum(), t64(x0), eps=1e-3)
    assert err < 1e-3, f"{name}: rel err {err}"


BINARY_CASES = [
    ("add", lambda x, y: (x + y).sum()),
    ("subtract", lambda x, y: (x - y).sum()),
    ("multiply", lambda x, y: (x * y * x).sum()),
    ("matmul", lambda x, y: (x @ y).sum()),
]


@pytest.mark.parametrize("name,fn", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
def test_binary_gradients_match_finite_differences(name, fn):
    a0 = _rand((4, 4))
    b0 = _rand((4, 1))  # exercises broadcasting on the elementwise ops
    fixed_b = t64(b0)
    err_a = ad.finite_difference_check(lambda x: fn(x, fixed_b), t64(a0), eps=1e-3)
    assert err_a < 1e-3, f"{name} (lhs): rel err {err_a}"
    fixed_a = t64(a0)
    err_b = ad.finite_difference_check(lambda y: fn(fixed_a, y), t64(b0), eps=1e-3)
    assert err_b < 1e-3, f"{name} (rhs): rel err {err_b}"


def test_concat_gradient():
    b0 = t64(_rand((2, 3)))

    def f(x):
        return (ad.concat([x, b0], axis=1) * 2.0).sum()

    assert ad.finite_difference_check(f, t64(_rand((2, 2)))) < 1e-3


def test_conv1d_gradients_all_operands():
    x0 = _rand((2, 8, 3))
    w0 = _rand((3, 3, 4))
    b0 = _rand((4,))

    xs, ws, bs = t64(x0), t64(w0), t64(b0)

    def fx(x):
        return ad.conv1d(x, ws, bs, stride=2, pad_left=1, pad_right=1).sum()

    def fw(w):
        return ad.conv1d(xs, w, bs, stride=2, pad_left=1, pad_right=1).sum()

    def fb(b):
        return ad.conv1d(xs, ws, b, stride=2, pad_left=1, pad_right=1).sum()

    assert ad.finite_difference_check(fx, xs) < 1e-3
    assert ad.finite_difference_check(fw, ws) < 1e-3
    assert ad.finite_difference_check(fb, bs) < 1e-3


def test_composite_conv_relu_sum_gradient():
    w = t64(_rand((3, 2, 2)))
    b = t64(_rand((2,)))

    def f(x):
        return ad.relu(ad.conv1d(x, w, b, stride=1, pad_left=1, pad_right=1)).sum()

    assert ad.finite_difference_check(f, t64(_rand((1, 6, 2)) + 0.3)) < 1e-3


def test_float32_finite_difference_within_tolerance():
    # float32 probes sit just above the roundoff floor, so this only holds for
    # well-conditioned f (O(1) per-coordinate gradients); the broad sweeps above
    # use float64 probes instead.
    rng = np.random.default_rng(99)
    x = ad.Tensor(rng.uniform(-1, 1, size=(2, 2)).astype(np.float32))
    err = ad.finite_difference_check(lambda t: ad.tanh(t).sum(), x, eps=1e-3)
    assert err < 1e-3


def test_finite_difference_negative_control():
    # corrupt exp's backward rule; the oracle must flag it loudly
    original = ad.PRIMITIVES["exp"]

    def bad_exp(a):
        out = np.exp(a)

        def backward(g):
            return (g * out * 1.7,)

        return out, backward

    ad.PRIMITIVES["exp"] = bad_exp
    try:
        err = ad.finite_difference_check(lambda x: ad.exp(x).sum(), t64(_rand((3, 3))))
    finally:
        ad.PRIMITIVES["exp"] = original
    assert err > 1e-2


def test_finite_difference_linear_function_is_exact():
    err = ad.finite_difference_check(lambda x: x.sum(), t64(_rand((5, 5))))
    assert err < 1e-9


def test_finite_difference_rejects_nonfinite_probe():
    x = t64(np.full((2,), 710.0))
    with pytest.raises(ad.NonFiniteError):
        ad.finite_difference_check(lambda t: ad.exp(t).sum(), x)


# -- composition helpers --------------------------------------------------------


def test_minimum_maximum_compositions():
    a = ad.constant([1.0, 5.0, -2.0])
    b = ad.constant([3.0, 2.0, -4.0])
    np.testing.assert_allclose(ad.minimum(a, b).data, [1.0, 2.0, -4.0])
    np.testing.assert_allclose(ad.maximum(a, b).data, [3.0, 5.0, -2.0])
    np.testing.assert_allclose(ad.clamp_min(a, 0.0).data, [1.0, 5.0, 0.0])
    np.testing.assert_allclose(ad.clamp_max(a, 2.0).data, [1.0, 2.0, -2.0])
    np.testing.assert_allclose(ad.absolute(b).data, [3.0, 2.0, 4.0])


# -- properties -----------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = ad.constant(rng.normal(scale=3.0, size=(rows, cols)).astype(np.float32))
    out = ad.softmax(x, axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), np.ones(rows), atol=1e-6)
    assert (out > 0).all() and (out < 1.0 + 1e-7).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_gradient_accumulation_matches_manual_chain(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(3,)).astype(np.float64)
    x = t64(x0, requires_grad=True)
    with ad.ComputationTape() as tape:
        y = x * x + x * 2.0  # x fans out three times
        loss = y.sum()
    g = ad.backward(loss, tape)[x].data
    np.testing.assert_allclose(g, 2.0 * x0 + 2.0, rtol=1e-10)


# -- Adam -------------------------------------------------------------------------


def _adam_fixture(values, lr=0.001):
    params = {"p": ad.parameter(np.asarray(values, dtype=np.float32))}
    state = ad.AdamState.for_params(params, lr=lr)
    return params, state


def _grad_map(params, arrays):
    return ad.GradientMap(
        {p.tid: ad.Tensor(np.asarray(a, dtype=np.float32)) for p, a in zip(params.values(), arrays)}
    )


def test_adam_zero_gradient_leaves_parameter_unchanged():
    params, state = _adam_fixture([1.5, -2.0])
    before = params["p"].data.copy()
    ad.adam_step(params, _grad_map(params, [[0.0, 0.0]]), state)
    np.testing.assert_array_equal(params["p"].data, before)
    assert state.step == 1


def test_adam_first_step_magnitude():
    params, state = _adam_fixture([0.0])
    ad.adam_step(params, _grad_map(params, [[1.0]]), state)
    # bias-corrected m_hat = v_hat = 1 -> update = lr / (1 + eps)
    assert params["p"].data[0] == pytest.approx(-0.001, rel=1e-4)


def test_adam_identical_states_give_identical_updates():
    params = {
        "a": ad.parameter(np.asarray([0.3, 0.7], dtype=np.float32)),
        "b": ad.parameter(np.asarray([0.3, 0.7], dtype=np.float32)),
    }
    state = ad.AdamState.for_params(params, lr=0.01)
    grads = ad.GradientMap(
        {p.tid: ad.Tensor(np.asarray([0.5, -0.25], dtype=np.float32)) for p in params.values()}
    )
    ad.adam_step(params, grads, state)
    np.testing.assert_array_equal(params["a"].data, params["b"].data)


def test_adam_missing_gradient_is_an_error():
    params, state = _adam_fixture([1.0])
    with pytest.raises(ad.AutodiffError, match="missing gradient"):
        ad.adam_step(params, ad.GradientMap({}), state)


def test_adam_rejects_nonpositive_learning_rate():
    with pytest.raises(ValueError):
        ad.AdamState.for_params({"p": ad.parameter([1.0])}, lr=0.0)


def test_clip_gradients_rescales_to_max_norm():
    params = {"p": ad.parameter([0.0, 0.0])}
    grads = _grad_map(params, [[3.0, 4.0]])  # norm 5
    clipped = ad.clip_gradients(grads, params, max_norm=1.0)
    np.testing.assert_allclose(clipped[params["p"]].data, [0.6, 0.8], rtol=1e-6)
    untouched = ad.clip_gradients(grads, params, max_norm=10.0)
    np.testing.assert_array_equal(untouched[params["p"]].data, [3.0, 4.0])
