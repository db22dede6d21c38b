import numpy as np
import pytest

import sfolab.autodiff as ad
from sfolab.basis import build_basis, extend_modes
from sfolab.fft import circular_convolve, circular_correlate
from sfolab.model import SFOConfig, SFOModel


def primitive_cases(rng):
    """(name, op, inputs) for every primitive at small seeded shapes."""
    B, c, n = 2, 3, 8
    x = rng.standard_normal((B, c, n))
    spectra = extend_modes(build_basis("usb", n, 4), 1).spectra
    kernel = rng.standard_normal(n)
    target = rng.standard_normal((B, c, n))
    return [
        ("add", lambda t: ad.add(t[0], t[1]), [x, rng.standard_normal(x.shape)]),
        ("scale", lambda t: ad.scale(t[0], -1.7), [x]),
        ("mul", lambda t: ad.mul(t[0], t[1]), [x, rng.standard_normal(x.shape)]),
        ("channel_mix", lambda t: ad.channel_mix(t[0], t[1], t[2]),
         [rng.standard_normal((4, c)), x, rng.standard_normal(4)]),
        ("gelu", lambda t: ad.gelu(t[0]), [x]),
        ("sigmoid", lambda t: ad.sigmoid(t[0]), [x]),
        ("layer_norm", lambda t: ad.layer_norm(t[0], t[1], t[2]),
         [x, 1 + 0.1 * rng.standard_normal(c), rng.standard_normal(c)]),
        ("circular_conv", lambda t: ad.circular_conv(t[0], kernel), [x]),
        ("spectral_conv", lambda t: ad.spectral_conv(t[0], t[1], spectra, 1.0 / n),
         [x, rng.standard_normal((4, 2, c))]),
        ("sum_all", lambda t: ad.sum_all(t[0]), [x]),
        ("rel_l2_loss", lambda t: ad.rel_l2_loss(t[0], target), [x]),
    ]


def layer_case(seed, variant="mlp"):
    cfg = SFOConfig(L=4, d=3, T=1, variant=variant, grid=(8,), in_channels=1, out_channels=1, seed=seed)
    model = SFOModel(cfg)
    rng = np.random.default_rng(seed)
    for p in model.params.values():       # move off the zero/one initial values
        p.value = p.value + 0.1 * rng.standard_normal(p.value.shape)
    names = [f"layers.0.{k}" for k in model.layer_params(0)]

    def op(ts):
        for name, t in zip(names, ts[1:]):
            model.params[name] = t
        return model.layer_forward(ts[0], 0)

    inputs = [rng.standard_normal((2, 3, 8))] + [model.params[n].value.copy() for n in names]
    return op, inputs


@pytest.mark.parametrize("index", range(11))
def test_primitive_gradients(index):
    name, op, inputs = primitive_cases(np.random.default_rng(index))[index]
    assert ad.grad_check(op, inputs) <= 1e-5, name


@pytest.mark.parametrize("variant", ["mlp", "glu"])
def test_layer_gradient(variant):
    op, inputs = layer_case(3, variant)
    assert ad.grad_check(op, inputs) <= 1e-5


def test_linear_and_gelu_bounds(rng):
    W = rng.standard_normal((3, 3))
    assert ad.grad_check(lambda t: ad.channel_mix(W, t[0]), [rng.standard_normal((2, 3, 4))]) <= 1e-9
    assert ad.grad_check(lambda t: ad.gelu(t[0]), [rng.standard_normal((3, 5))]) <= 1e-6


def test_forward_examples():
    assert ad.gelu(ad.Tensor(0.0)).value == 0.0
    assert ad.sigmoid(ad.Tensor(0.0)).value == 0.5
    x = ad.Tensor(np.full((1, 4, 3), 2.5))
    out = ad.layer_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)))
    assert np.array_equal(out.value, np.zeros((1, 4, 3)))
    bias = np.array([0.1, 0.2, 0.3, 0.4])
    out = ad.layer_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(bias))
    assert np.array_equal(out.value[0, :, 1], bias)
    v = np.random.default_rng(0).standard_normal((2, 4, 8))
    assert np.array_equal(ad.channel_mix(np.eye(4), ad.Tensor(v)).value, v)


def test_backward_examples():
    x = ad.parameter(3.0)
    with ad.Tape():
        loss = ad.mul(x, x)
    assert ad.backward(loss)[x] == 6.0
    u = ad.parameter(np.random.default_rng(0).standard_normal((1, 1, 8)))
    delta = np.zeros(8)
    delta[0] = 1.0
    with ad.Tape():
        loss = ad.sum_all(ad.circular_conv(u, delta))
    assert np.allclose(ad.backward(loss)[u], 1.0, atol=1e-15)


def test_conv_adjoint(rng):
    for _ in range(5):
        u, k, w = rng.standard_normal((3, 32))
        assert abs(np.dot(circular_convolve(u, k), w) - np.dot(u, circular_correlate(w, k))) <= 1e-10
    u = ad.parameter(rng.standard_normal((1, 1, 16)))
    k, w = rng.standard_normal(16), rng.standard_normal((1, 1, 16))
    with ad.Tape():
        loss = ad.sum_all(ad.mul(ad.circular_conv(u, k), ad.Tensor(w)))
    g = ad.backward(loss)[u]
    assert np.abs(g[0, 0] - circular_correlate(w[0, 0], k)).max() <= 1e-12


def test_rel_l2_zero_at_target(rng):
    u = rng.standard_normal((3, 2, 8))
    p = ad.parameter(u.copy())
    with ad.Tape():
        loss = ad.rel_l2_loss(p, u)
    assert loss.value == 0.0
    assert np.abs(ad.backward(loss)[p]).max() <= 1e-12
    with pytest.raises(ValueError):
        ad.rel_l2_loss(ad.Tensor(u), np.zeros_like(u))


def test_rel_l2_value(rng):
    u = rng.standard_normal((4, 8))
    pred = u + 0.1 * rng.standard_normal((4, 8))
    ref = np.mean(np.linalg.norm(pred - u, axis=1) / np.linalg.norm(u, axis=1))
    assert ad.rel_l2_loss(ad.Tensor(pred), u).value == pytest.approx(ref, rel=1e-14)


def test_deterministic_gradients():
    grads = []
    for _ in range(2):
        op, inputs = layer_case(5)
        params = [ad.parameter(a) for a in inputs]
        with ad.Tape():
            loss = ad.sum_all(op(params))
        g = ad.backward(loss)
        grads.append([g[p] for p in params])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_shape_errors():
    with pytest.raises(ValueError, match="add"):
        ad.add(ad.Tensor(np.ones(3)), ad.Tensor(np.ones(4)))
    with pytest.raises(ValueError, match="channel_mix"):
        ad.channel_mix(np.ones((2, 3)), ad.Tensor(np.ones((1, 4, 8))))


def test_tape_rules():
    x = ad.parameter(np.ones(3))
    # no tape: plain evaluation, the result cannot be differentiated
    y = ad.scale(x, 2.0)
    assert np.array_equal(y.value, [2.0, 2.0, 2.0])
    with pytest.raises(ad.TapeError):
        ad.backward(ad.sum_all(x))
    with ad.Tape():
        with pytest.raises(ad.TapeError):
            ad.scale(y, 2.0)              # detached intermediate fed into a recorded op
    with ad.Tape():
        a = ad.scale(x, 2.0)
    with ad.Tape():
        with pytest.raises(ad.TapeError):
            ad.add(a, x)                  # value from another tape
    with ad.Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    tape.release()
    with pytest.raises(ad.TapeError):
        ad.backward(loss)
    with pytest.raises(ValueError):
        with ad.Tape():
            ad.backward(ad.mul(x, x))     # not a scalar


def test_gradient_accumulation():
    x = ad.parameter(np.array([1.0, 2.0]))
    for _ in range(2):
        with ad.Tape():
            loss = ad.sum_all(ad.mul(x, x))
        ad.backward(loss, accumulate=True)
    assert np.array_equal(x.grad, [4.0, 8.0])
    with ad.Tape():
        loss = ad.sum_all(ad.add(x, x))
    assert np.array_equal(ad.backward(loss)[x], [2.0, 2.0])


def test_grad_check_validates_step():
    with pytest.raises(ValueError):
        ad.grad_check(lambda t: t[0], [np.ones(2)], step=0.0)
