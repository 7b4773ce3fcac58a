import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from nfdetect import autodiff as ad
from nfdetect.flow import (
    CompiledFlow,
    FlowConfig,
    FlowNumericError,
    InvalidParameterError,
    TrainOptions,
    actnorm_forward,
    actnorm_init,
    coupling_forward,
    flow_inverse,
    flow_logprob,
    forward_graph,
    from_columns,
    init_params,
    invconv_forward,
    log_likelihood,
    nll_loss,
    squeeze,
    to_columns,
    train,
    unsqueeze,
)
from nfdetect.noise import NoiseSpec, sample_noise

from conftest import GAUSS_ENTROPY_PER_DIM, identity_params, random_params

_cplx = st.complex_numbers(max_magnitude=1e3, allow_nan=False, allow_infinity=False)


def _ones(b):
    return ad.constant(np.ones((1, b)))


def _num_jacobian(fn, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    jac = np.empty((x.size, x.size))
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        jac[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return jac


def _layer_map(params, layer_fn):
    def fn(v):
        out, _ = layer_fn(params, ad.constant(v.reshape(-1, 1)), _ones(1))
        return out.value.ravel()

    def logdet(v):
        _, ld = layer_fn(params, ad.constant(v.reshape(-1, 1)), _ones(1))
        return float(ld.value[0, 0])

    return fn, logdet


# --- squeeze -------------------------------------------------------------------


def test_squeeze_layout():
    np.testing.assert_array_equal(squeeze(np.array([1 + 2j])), [[1.0, 2.0]])
    assert not squeeze(np.array([1.0, -3.0, 2.5])).T[1].any()


@settings(max_examples=50)
@given(arrays(np.complex128, st.integers(1, 6), elements=_cplx))
def test_squeeze_bijection(w):
    assert unsqueeze(squeeze(w)).tobytes() == w.tobytes()
    np.testing.assert_array_equal(from_columns(to_columns(w[None])).ravel(), w)


# --- actnorm -------------------------------------------------------------------


def _standard_batch(b=4000, m=2, seed=0):
    gen = np.random.default_rng(seed)
    h = gen.normal(size=(2 * m, b))
    r = h.reshape(m, 2, b)
    r -= r.mean(axis=(0, 2), keepdims=True)
    r /= r.std(axis=(0, 2), keepdims=True)
    return r.reshape(2 * m, b)


def test_actnorm_init_standard_batch_is_identity():
    p = init_params(FlowConfig(dim=2), 0)
    actnorm_init(p, 0, _standard_batch())
    np.testing.assert_allclose(p["step0.actnorm.scale"].value.ravel(), [1, 1], atol=1e-12)
    np.testing.assert_allclose(p["step0.actnorm.bias"].value.ravel(), [0, 0], atol=1e-12)


def test_actnorm_init_std_two():
    p = init_params(FlowConfig(dim=2), 0)
    actnorm_init(p, 0, 2.0 * _standard_batch())
    np.testing.assert_allclose(p["step0.actnorm.scale"].value.ravel(), [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(p["step0.actnorm.bias"].value.ravel(), [0, 0], atol=1e-12)


def test_actnorm_init_standardises_batch_once():
    gen = np.random.default_rng(3)
    h = gen.normal(size=(6, 500)) * np.array([[3.0], [0.2]] * 3) + np.array([[1.0], [-4.0]] * 3)
    p = init_params(FlowConfig(dim=3), 0)
    actnorm_init(p, 0, h)
    out, _ = actnorm_forward(p, 0, ad.constant(h), _ones(500))
    per = out.value.reshape(3, 2, 500)
    np.testing.assert_allclose(per.mean(axis=(0, 2)), 0.0, atol=1e-6)
    np.testing.assert_allclose(per.var(axis=(0, 2)), 1.0, atol=1e-6)
    before = p["step0.actnorm.scale"].value.copy()
    actnorm_init(p, 0, 5.0 * h)  # second call is a no-op
    np.testing.assert_array_equal(p["step0.actnorm.scale"].value, before)


def test_actnorm_robust_init_ignores_impulses():
    h = _standard_batch(b=4000)
    h[:, :20] = 1e6
    p = init_params(FlowConfig(dim=2), 0)
    actnorm_init(p, 0, h, robust=True)
    np.testing.assert_allclose(p["step0.actnorm.scale"].value.ravel(), 1.0, atol=0.1)


def test_actnorm_constant_channel_uses_floor():
    p = init_params(FlowConfig(dim=2), 0)
    actnorm_init(p, 0, np.ones((4, 10)))
    assert np.all(np.isfinite(p["step0.actnorm.scale"].value))


def test_actnorm_identity_and_logdet():
    p = init_params(FlowConfig(dim=4), 0)
    p.actnorm_ready[0] = True
    x = np.random.default_rng(0).normal(size=(8, 3))
    out, ld = actnorm_forward(p, 0, ad.constant(x), _ones(3))
    np.testing.assert_array_equal(out.value, x)
    assert not ld.value.any()
    p["step0.actnorm.scale"].value = np.full((2, 1), math.e)
    _, ld = actnorm_forward(p, 0, ad.constant(x), _ones(3))
    np.testing.assert_allclose(ld.value, 8.0, atol=1e-12)


def test_actnorm_zero_scale_rejected():
    p = init_params(FlowConfig(dim=2), 0)
    p["step0.actnorm.scale"].value = np.array([[1.0], [0.0]])
    with pytest.raises(InvalidParameterError):
        actnorm_forward(p, 0, ad.constant(np.ones((4, 1))), _ones(1))


# --- 1x1 conv ------------------------------------------------------------------


def test_invconv_identity_and_rotation():
    p = init_params(FlowConfig(dim=3), 0)
    x = np.random.default_rng(1).normal(size=(6, 4))
    rot_ld = invconv_forward(p, 0, ad.constant(x), _ones(4))[1].value
    np.testing.assert_allclose(rot_ld, 0.0, atol=1e-12)
    p["step0.conv.weight"].value = np.eye(2)
    out, ld = invconv_forward(p, 0, ad.constant(x), _ones(4))
    np.testing.assert_array_equal(out.value, x)
    assert not ld.value.any()


def test_invconv_diag_logdet():
    p = init_params(FlowConfig(dim=5), 0)
    p["step0.conv.weight"].value = np.diag([2.0, 3.0])
    _, ld = invconv_forward(p, 0, ad.constant(np.ones((10, 2))), _ones(2))
    np.testing.assert_allclose(ld.value, 5 * math.log(6), atol=1e-12)


def test_invconv_mixes_each_position():
    p = init_params(FlowConfig(dim=2), 0)
    w = np.array([[1.0, 2.0], [0.5, -1.0]])
    p["step0.conv.weight"].value = w
    x = np.array([[1.0], [2.0], [3.0], [4.0]])
    out, _ = invconv_forward(p, 0, ad.constant(x), _ones(1))
    np.testing.assert_allclose(out.value.ravel(), np.concatenate([w @ [1, 2], w @ [3, 4]]))


def test_singular_conv_rejected():
    p = init_params(FlowConfig(dim=2), 0)
    p["step0.conv.weight"].value = np.array([[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(InvalidParameterError):
        invconv_forward(p, 0, ad.constant(np.ones((4, 1))), _ones(1))


# --- coupling ------------------------------------------------------------------


def test_zero_coupling_is_identity():
    p = init_params(FlowConfig(dim=4), 0)
    for name in p.nodes:
        if "coupling" in name:
            p[name].value = np.zeros_like(p[name].value)
    x = np.random.default_rng(2).normal(size=(8, 5))
    for which in (0, 1):
        out, ld = coupling_forward(p, 0, which, ad.constant(x), _ones(5))
        np.testing.assert_array_equal(out.value, x)
        assert not ld.value.any()


def test_coupling_keeps_conditioning_half():
    p = random_params(4, seed=1)
    x = np.random.default_rng(2).normal(size=(8, 3))
    out0, _ = coupling_forward(p, 0, 0, ad.constant(x), _ones(3))
    out1, _ = coupling_forward(p, 0, 1, ad.constant(x), _ones(3))
    np.testing.assert_array_equal(out0.value[:4], x[:4])
    np.testing.assert_array_equal(out1.value[4:], x[4:])
    assert not np.allclose(out0.value[4:], x[4:])


@pytest.mark.parametrize("dim", [1, 2, 3, 4])
def test_layer_logdets_match_dense_jacobian(dim):
    gen = np.random.default_rng(dim)
    p = random_params(dim, seed=dim, spread=0.5)
    layers = [
        lambda q, h, o: actnorm_forward(q, 1, h, o),
        lambda q, h, o: invconv_forward(q, 1, h, o),
        lambda q, h, o: coupling_forward(q, 1, 0, h, o),
        lambda q, h, o: coupling_forward(q, 1, 1, h, o),
    ]
    for layer in layers:
        fn, logdet = _layer_map(p, layer)
        for _ in range(10):
            v = gen.normal(size=2 * dim) * 1.5
            _, numeric = np.linalg.slogdet(_num_jacobian(fn, v))
            assert abs(numeric - logdet(v)) < 1e-6


def test_unclamped_coupling_uses_raw_scale():
    p = random_params(2, seed=4, scale_clamp=None)
    x = np.random.default_rng(4).normal(size=(4, 1))
    out, ld = coupling_forward(p, 0, 0, ad.constant(x), _ones(1))
    fn, _ = _layer_map(p, lambda q, h, o: coupling_forward(q, 0, 0, h, o))
    _, numeric = np.linalg.slogdet(_num_jacobian(fn, x.ravel()))
    assert abs(numeric - ld.value[0, 0]) < 1e-6


@pytest.mark.parametrize("dim", [1, 2, 4])
def test_coupling_inverse(dim):
    p = random_params(dim, seed=7)
    x = np.random.default_rng(7).normal(size=(2 * dim, 50))
    z = forward_graph(p, x, trace=True)[1].activations[-1]
    back = flow_inverse(p, z.reshape(50, -1).T)
    np.testing.assert_allclose(back, x, atol=1e-9)


# --- full flow -----------------------------------------------------------------


def test_identity_flow_is_standard_normal():
    p = identity_params(3)
    w = np.array([0.3 - 1.2j, 2.0 + 0.1j, -0.5j])
    ll, _ = flow_logprob(p, w)
    expected = -0.5 * np.sum(squeeze(w) ** 2) - 6 * 0.5 * math.log(2 * math.pi)
    assert ll == pytest.approx(expected, abs=1e-12)


def _batched_jacobian(params, v, h=1e-6):
    """Central-difference Jacobian of data -> latent, all probes in one pass."""
    n = v.size
    probes = np.concatenate([v[:, None] + h * np.eye(n), v[:, None] - h * np.eye(n)], axis=1)
    with ad.no_grad():
        _, tr = forward_graph(params, probes, trace=True)
    z = tr.activations[-1].reshape(2 * n, -1).T
    return (z[:, :n] - z[:, n:]) / (2 * h)


def _check_full_logdet(params, inputs):
    with ad.no_grad():
        _, tr = forward_graph(params, inputs, trace=True)
    for i in range(inputs.shape[1]):
        _, numeric = np.linalg.slogdet(_batched_jacobian(params, inputs[:, i]))
        assert abs(numeric - tr.total_log_det[i]) < 1e-5


@pytest.mark.parametrize("dim", [1, 2, 3, 4])
def test_full_flow_logdet_matches_dense_jacobian(dim):
    # moderate random weights; the difference oracle loses accuracy on near-kink, badly conditioned maps
    p = random_params(dim, seed=10 + dim, spread=0.15)
    _check_full_logdet(p, np.random.default_rng(dim).normal(size=(2 * dim, 100)))


def test_trained_flow_logdet_matches_dense_jacobian(unit_gaussian_flow):
    _check_full_logdet(unit_gaussian_flow.params, np.random.default_rng(0).normal(size=(8, 100)))


@pytest.mark.parametrize("dim", [1, 2, 3, 4])
def test_inverse_reconstructs_inputs(dim):
    p = random_params(dim, seed=20 + dim, spread=0.15)
    x = 2.0 * np.random.default_rng(5).normal(size=(2 * dim, 100))
    z = forward_graph(p, x, trace=True)[1].activations[-1]
    np.testing.assert_allclose(flow_inverse(p, z.reshape(100, -1).T), x, atol=1e-8, rtol=0)


def test_trained_inverse_reconstructs_inputs(unit_gaussian_flow):
    p = unit_gaussian_flow.params
    x = sample_noise(NoiseSpec("gaussian", sigma=1.0), 100, 4, seed=17).samples
    cols = to_columns(x)
    z = forward_graph(p, cols, trace=True)[1].activations[-1]
    np.testing.assert_allclose(flow_inverse(p, z.reshape(100, -1).T), cols, atol=1e-8, rtol=0)


def test_trace_decomposition():
    p = random_params(4, seed=3)
    w = np.array([0.1 + 0.2j, -1.0j, 0.7, 1.5 - 0.3j])
    ll, tr = flow_logprob(p, w)
    assert ll == pytest.approx(tr.latent_logprob[0] + tr.total_log_det[0], abs=1e-12)
    assert len(tr.activations) == p.config.k_steps + 1
    assert len(tr.log_dets) == 4 * p.config.k_steps
    np.testing.assert_array_equal(tr.activations[0][0], squeeze(w))


def test_compiled_flow_matches_graph():
    p = random_params(4, seed=8)
    w = np.random.default_rng(8).normal(size=(300, 4)) + 1j * np.random.default_rng(9).normal(size=(300, 4))
    np.testing.assert_allclose(CompiledFlow(p)(w), log_likelihood(p, w), rtol=1e-12, atol=1e-10)


def test_numeric_error_names_layer():
    p = random_params(2, seed=1, scale_clamp=None)
    p["step0.coupling0.scale_net.layer2.bias"].value = np.full((2, 1), 800.0)
    with pytest.raises(FlowNumericError) as info:
        flow_logprob(p, np.array([0.1, 0.2]))
    assert info.value.layer == "step0.coupling0"
    assert "step0.coupling0" in str(info.value)


def test_saturating_flow_scores_overflow_as_minus_inf():
    p = random_params(2, seed=1, scale_clamp=None)
    p["step0.coupling0.scale_net.layer2.bias"].value = np.full((2, 1), 800.0)
    ll = CompiledFlow(p, saturate=True)(np.array([[0.1, 0.2]]))
    assert ll[0] == -np.inf
    with pytest.raises(FlowNumericError):
        CompiledFlow(p)(np.array([[0.1, 0.2]]))


def test_uninitialised_actnorm_rejected():
    with pytest.raises(InvalidParameterError):
        flow_logprob(init_params(FlowConfig(dim=2)), np.zeros(2))


def test_config_validation():
    for bad in (dict(dim=0), dict(dim=4, partition_m=4), dict(dim=4, k_steps=0), dict(dim=2, scale_clamp=-1.0)):
        with pytest.raises(ValueError):
            FlowConfig(**bad)
    assert FlowConfig(dim=6).partition == 3


def _density_integral(params, lim, n=801):
    g = np.linspace(-lim, lim, n)
    re, im = np.meshgrid(g, g, indexing="ij")
    dens = np.exp(CompiledFlow(params)((re + 1j * im).reshape(-1, 1))).reshape(n, n)
    return np.trapezoid(np.trapezoid(dens, g, axis=1), g)


def test_single_dimension_density_integrates_to_one():
    assert abs(_density_integral(random_params(1, seed=2), 20.0) - 1.0) < 0.01
    data = sample_noise(NoiseSpec("gaussian", sigma=1.0), 24_000, 1, seed=3)
    trained = train(FlowConfig(dim=1), data, TrainOptions(epochs=3, seed=1)).params
    assert abs(_density_integral(trained, 20.0) - 1.0) < 0.01


def test_common_offset_keeps_argmax():
    p = random_params(2, seed=6)
    cand = np.random.default_rng(6).normal(size=(64, 2)) + 0j
    flow = CompiledFlow(p)
    base = flow(cand)
    flow.const += 123.456
    shifted = flow(cand)
    assert np.argmax(base) == np.argmax(shifted)
    np.testing.assert_allclose(shifted - base, 123.456, atol=1e-9)


# --- loss and training ---------------------------------------------------------


def test_single_sample_loss():
    p = random_params(2, seed=2)
    w = np.array([0.4 - 0.1j, -0.9 + 1.1j])
    loss = nll_loss(p, to_columns(w[None]))
    assert loss.item() == pytest.approx(-flow_logprob(p, w)[0], abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_nll_gradient_check(seed):
    # unit-scale data: heavy-tailed batches inflate the loss until differences are round-off bound
    p = random_params(2, seed=seed, k_steps=2, spread=0.15)
    batch = to_columns(sample_noise(NoiseSpec("gaussian"), 16, 2, seed=seed).samples)
    rep = ad.gradient_check(lambda: nll_loss(p, batch), p.parameters(), tolerance=1e-4)
    assert rep.passed, rep


def test_nll_gradient_check_unclamped():
    p = random_params(2, seed=5, k_steps=1, scale_clamp=None)
    batch = to_columns(sample_noise(NoiseSpec("gaussian"), 8, 2, seed=2).samples)
    assert ad.gradient_check(lambda: nll_loss(p, batch), p.parameters(), tolerance=1e-4).passed


def test_training_loss_trends_down():
    data = sample_noise(NoiseSpec("sas", alpha=1.5), 12_000, 2, seed=4)
    res = train(FlowConfig(dim=2), data, TrainOptions(epochs=10, batch_size=256, seed=2, keep_best=False))
    nll = np.array([r.train_nll for r in res.history])
    assert len(nll) == 10
    slope = np.polyfit(np.arange(10), nll, 1)[0]
    assert slope < 0 and nll[-1] < nll[0]


def test_gaussian_flow_reaches_entropy(unit_gaussian_flow):
    per_dim = unit_gaussian_flow.final_nll / 8
    assert abs(per_dim - GAUSS_ENTROPY_PER_DIM) < 0.05
    held = sample_noise(NoiseSpec("gaussian", sigma=1.0), 20_000, 4, seed=99).samples
    fresh = -CompiledFlow(unit_gaussian_flow.params)(held).mean() / 8
    assert abs(fresh - GAUSS_ENTROPY_PER_DIM) < 0.05


def test_heavy_tailed_flow_beats_gaussian_fit():
    data = sample_noise(NoiseSpec("sas", alpha=1.5), 36_000, 2, seed=5).samples
    res = train(FlowConfig(dim=2), data, TrainOptions(epochs=8, seed=3))
    n_hold = 36_000 // 6
    train_part, hold = data[:-n_hold], data[-n_hold:]
    x = squeeze(train_part).reshape(len(train_part), -1)
    lo, hi = np.percentile(x, [1, 99])
    clipped = np.clip(x, lo, hi)
    mu, var = clipped.mean(axis=0), clipped.var(axis=0)
    xh = squeeze(hold).reshape(n_hold, -1)
    gauss_nll = np.mean(np.sum(0.5 * np.log(2 * np.pi * var) + (xh - mu) ** 2 / (2 * var), axis=1))
    flow_nll = -CompiledFlow(res.params)(hold).mean()
    assert flow_nll < gauss_nll


def test_training_is_deterministic():
    data = sample_noise(NoiseSpec("sas", alpha=1.7), 6000, 2, seed=6)
    a = train(FlowConfig(dim=2), data, TrainOptions(epochs=2, batch_size=512, seed=4)).params.arrays()
    b = train(FlowConfig(dim=2), data, TrainOptions(epochs=2, batch_size=512, seed=4)).params.arrays()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_training_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        train(FlowConfig(dim=3), np.zeros((100, 2), complex))
