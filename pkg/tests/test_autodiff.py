import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nfdetect import autodiff as ad


def _p(v, name=None):
    return ad.parameter(np.array(v, dtype=float), name)


def test_relu_forward():
    assert ad.relu(ad.constant([[-1.0]])).value[0, 0] == 0.0
    assert ad.relu(ad.constant([[2.0]])).value[0, 0] == 2.0


def test_sum_of_ones():
    assert ad.sum_all(ad.constant(np.ones((2, 2)))).item() == 4.0


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(ad.constant(a), ad.constant(np.eye(2))).value, a)


def test_apply_primitive_dispatch():
    x = ad.constant([[1.0, -2.0]])
    np.testing.assert_array_equal(ad.apply_primitive("abs", x).value, [[1.0, 2.0]])
    with pytest.raises(ad.ContractViolation):
        ad.apply_primitive("conv3d", x)


def test_shape_mismatch_is_contract_violation():
    with pytest.raises(ad.ContractViolation):
        ad.add(ad.constant(np.ones((2, 1))), ad.constant(np.ones((1, 2))))
    with pytest.raises(ad.ContractViolation):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_overflow_is_numeric_error():
    with pytest.raises(ad.NumericOverflowError):
        ad.exp(ad.constant([[1000.0]]))
    with pytest.raises(ad.NumericOverflowError):
        ad.log(ad.constant([[0.0]]))


def test_square_gradient():
    x = _p([[3.0]])
    ad.backward(ad.sum_all(ad.mul(x, x)))
    assert x.grad[0, 0] == 6.0


def test_relu_subgradient():
    x = _p([[-1.0, 2.0]])
    ad.backward(ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])


def test_relu_gradient_at_zero_is_zero():
    x = _p([[0.0]])
    ad.backward(ad.sum_all(ad.relu(x)))
    assert x.grad[0, 0] == 0.0


def test_backward_needs_scalar():
    with pytest.raises(ad.ContractViolation):
        ad.backward(ad.mul(_p([[1.0, 2.0]]), _p([[1.0, 2.0]])))


def test_backward_accumulates_until_zeroed():
    x = _p([[2.0]])
    for _ in range(2):
        ad.backward(ad.sum_all(ad.mul(x, x)))
    assert x.grad[0, 0] == 8.0
    ad.zero_grad([x])
    assert x.grad[0, 0] == 0.0


def test_gradient_linearity():
    gen = np.random.default_rng(0)
    w = _p(gen.normal(size=(3, 2)))
    x = ad.constant(gen.normal(size=(2, 4)))

    def loss_a():
        return ad.sum_all(ad.tanh(ad.matmul(w, x)))

    def loss_b():
        return ad.sum_all(ad.exp(ad.scale(ad.matmul(w, x), 0.1)))

    ad.backward(loss_a())
    ga = w.grad.copy()
    ad.zero_grad([w])
    ad.backward(loss_b())
    gb = w.grad.copy()
    ad.zero_grad([w])
    ad.backward(ad.add(loss_a(), loss_b()))
    np.testing.assert_allclose(w.grad, ga + gb, rtol=1e-12)


def test_forward_is_deterministic():
    gen = np.random.default_rng(1)
    a, b = gen.normal(size=(4, 3)), gen.normal(size=(3, 5))
    outs = [ad.tanh(ad.matmul(ad.constant(a), ad.constant(b))).value for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


def _mlp_builder(seed=0):
    gen = np.random.default_rng(seed)
    ws = [_p(gen.normal(size=s)) for s in [(5, 3), (5, 5), (1, 5)]]
    bs = [_p(gen.normal(size=(s, 1))) for s in (5, 5, 1)]
    x = ad.constant(gen.normal(size=(3, 7)))
    ones = ad.constant(np.ones((1, 7)))

    def build():
        h = x
        for i, (w, b) in enumerate(zip(ws, bs)):
            h = ad.add(ad.matmul(w, h), ad.matmul(b, ones))
            if i < 2:
                h = ad.relu(h)
        return ad.sum_all(h)

    return build, ws + bs


def test_mlp_gradient_matches_finite_differences():
    build, params = _mlp_builder()
    rep = ad.gradient_check(build, params, tolerance=1e-4, h=1e-5)
    assert rep.passed, rep


def test_identity_network_has_zero_error():
    x = _p([[0.5, -1.5, 2.0]])
    rep = ad.gradient_check(lambda: ad.sum_all(x), [x])
    assert rep.max_abs_error < 1e-9 and rep.passed


def test_corrupted_rule_fails_gradient_check(monkeypatch):
    original = ad.tanh

    def bad_tanh(x):
        out = np.tanh(x.value)
        return ad._result("tanh", out, [(x, lambda g: g * out)])  # wrong derivative

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    x = _p([[0.3, -0.7, 1.1]])
    rep = ad.gradient_check(lambda: ad.sum_all(ad.tanh(x)), [x])
    assert not rep.passed
    monkeypatch.setattr(ad, "tanh", original)


_vals = arrays(np.float64, (2, 3), elements=st.floats(-2.0, 2.0))


@settings(max_examples=30, deadline=None)
@given(a=_vals, b=_vals)
def test_binary_primitives_gradients(a, b):
    pa, pb = _p(a), _p(b)
    for op in (ad.add, ad.sub, ad.mul):
        rep = ad.gradient_check(lambda: ad.sum_all(ad.tanh(op(pa, pb))), [pa, pb])
        assert rep.passed, (op.__name__, rep)


@settings(max_examples=30, deadline=None)
@given(a=_vals)
def test_unary_primitives_gradients(a):
    x = _p(a)
    weights = ad.constant(np.arange(1.0, 7.0).reshape(2, 3))
    for fn in (ad.exp, ad.tanh, lambda v: ad.scale(v, -1.7), lambda v: ad.reshape(v, (3, 2))):
        rep = ad.gradient_check(lambda: ad.sum_all(ad.mul(ad.reshape(fn(x), (2, 3)), weights)), [x])
        assert rep.passed, rep
    # keep clear of the kinks of abs and relu and the pole of log
    safe = _p(np.where(np.abs(a) < 0.05, 0.5, a))
    for fn in (ad.absolute, ad.relu):
        rep = ad.gradient_check(lambda: ad.sum_all(ad.mul(fn(safe), weights)), [safe], h=1e-7)
        assert rep.passed, rep
    pos = _p(np.abs(a) + 0.1)
    assert ad.gradient_check(lambda: ad.sum_all(ad.mul(ad.log(pos), weights)), [pos]).passed


@settings(max_examples=30, deadline=None)
@given(a=arrays(np.float64, (4, 3), elements=st.floats(-2.0, 2.0)), cut=st.integers(1, 3))
def test_row_primitives_gradients(a, cut):
    x = _p(a)
    m = ad.constant(np.arange(12.0).reshape(3, 4))

    def build():
        top, bot = ad.slice_rows(x, 0, cut), ad.slice_rows(x, cut, 4)
        joined = ad.concat_rows([ad.tanh(bot), top])
        return ad.sum_all(ad.matmul(m, joined))

    assert ad.gradient_check(build, [x]).passed


def test_adam_zero_gradient_keeps_parameters():
    x = _p([[1.0, -2.0]])
    state = ad.AdamState.for_params([x])
    x.grad = np.zeros_like(x.value)
    ad.adam_step([x], state)
    np.testing.assert_array_equal(x.value, [[1.0, -2.0]])
    assert state.step_count == 1


def test_adam_first_step_size():
    x = _p([[0.0]])
    state = ad.AdamState.for_params([x])
    x.grad = np.array([[1.0]])
    ad.adam_step([x], state)
    assert x.value[0, 0] == pytest.approx(-0.001, rel=1e-6)
    assert x.grad[0, 0] == 0.0


def test_adam_minimises_quadratic():
    x = _p([[1.0]])
    state = ad.AdamState.for_params([x], learning_rate=0.05)
    for _ in range(200):
        ad.backward(ad.sum_all(ad.mul(x, x)))
        ad.adam_step([x], state)
    assert abs(x.value[0, 0]) < 0.5
    assert state.step_count == 200


def test_adam_requires_initialised_moments():
    x = _p([[1.0]])
    x.grad = np.ones((1, 1))
    with pytest.raises(ad.ContractViolation):
        ad.adam_step([x], ad.AdamState())


def test_no_grad_records_no_edges():
    x = _p([[1.0]])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y.is_leaf and not y.requires_grad
