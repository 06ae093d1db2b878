import math

import numpy as np
import pytest

from sirlan.errors import NumericError, ShapeError, StateError
from sirlan.networks import LanSpec, spec_shapes
from sirlan.tensor import (Adadelta, Conv2D, Dense, Flatten, LayerSpec, MaxPool2D, ReLU,
                           Sequential, conv2d_forward, fc_forward, maxpool2d_forward, mse_loss)

from conftest import numeric_grad, rel_error


def loop_conv(x, k, b, pad, stride=1):
    """Direct nested-loop cross-correlation; pad is (top, bottom, left, right)."""
    t, bt, l, r = pad
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + t + bt, w + l + r, cin))
    xp[t:t + h, l:l + w] = x
    ho = (h + t + bt - kh) // stride + 1
    wo = (w + l + r - kw) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for o in range(cout):
                acc = b[o]
                for di in range(kh):
                    for dj in range(kw):
                        for c in range(cin):
                            acc += xp[i * stride + di, j * stride + dj, c] * k[di, dj, c, o]
                out[i, j, o] = acc
    return out


def brute_pool(x, k=2, s=2):
    h, w, c = x.shape
    ho, wo = math.ceil(h / s), math.ceil(w / s)
    out = np.empty((ho, wo, c))
    for i in range(ho):
        for j in range(wo):
            out[i, j] = x[i * s:i * s + k, j * s:j * s + k].reshape(-1, c).max(axis=0)
    return out


# --- forward ops -----------------------------------------------------------

def test_conv_scalar_multiply_add():
    out = conv2d_forward(np.array([[[2.0]]]), np.array([[[[3.0]]]]), [1.0])
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 7.0


def test_conv_sum_of_ones():
    out = conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)), [0.0])
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 9.0


def test_conv_matches_nested_loops(rng):
    x = rng.normal(size=(4, 4, 1))
    k = rng.normal(size=(2, 2, 1, 1))
    b = rng.normal(size=1)
    out = conv2d_forward(x, k, b, padding=(0, 1, 0, 1))
    assert out.shape == (4, 4, 1)
    np.testing.assert_allclose(out, loop_conv(x, k, b, (0, 1, 0, 1)), atol=1e-12, rtol=0)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_multichannel_strided(rng, stride):
    x = rng.normal(size=(7, 7, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out = conv2d_forward(x, k, b, padding=(1, 1, 1, 1), stride=stride)
    np.testing.assert_allclose(out, loop_conv(x, k, b, (1, 1, 1, 1), stride), atol=1e-12, rtol=0)


def test_conv_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(4, 4, 2\).*\(2, 2, 3, 1\)"):
        conv2d_forward(np.ones((4, 4, 2)), np.ones((2, 2, 3, 1)), [0.0])


def test_conv_non_integer_output_rejected():
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((4, 4, 1)), np.ones((2, 2, 1, 1)), [0.0], stride=2, padding=(0, 1, 0, 1))


def test_pool_reference_row():
    assert maxpool2d_forward(np.zeros((57, 57, 16))).shape == (29, 29, 16)


def test_pool_single_window():
    out = maxpool2d_forward(np.array([1.0, 2.0, 3.0, 4.0]).reshape(2, 2, 1))
    assert out.shape == (1, 1, 1) and out[0, 0, 0] == 4.0


def test_pool_matches_truncated_windows(rng):
    x = rng.normal(size=(5, 5, 1))
    out = maxpool2d_forward(x)
    assert out.shape == (3, 3, 1)
    np.testing.assert_array_equal(out, brute_pool(x))


def test_generic_pool_path_matches_brute_force(rng):
    x = rng.normal(size=(2, 7, 6, 3))
    layer = MaxPool2D((3, 3), stride=2)
    out = layer.forward(x)
    for b in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                win = x[b, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                np.testing.assert_array_equal(out[b, i, j], win.reshape(-1, 3).max(axis=0))


def test_fc_reference_row(rng):
    out = fc_forward(rng.normal(size=4096), rng.normal(size=(4096, 10)), np.zeros(10))
    assert out.shape == (10,)


def test_fc_identity(rng):
    x = rng.normal(size=6)
    np.testing.assert_array_equal(fc_forward(x, np.eye(6), np.zeros(6)), x)


def test_fc_dot_products(rng):
    x = rng.normal(size=3)
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    expect = [sum(x[i] * w[i, j] for i in range(3)) + b[j] for j in range(2)]
    np.testing.assert_allclose(fc_forward(x, w, b), expect, atol=1e-12, rtol=0)


def test_fc_dimension_mismatch():
    with pytest.raises(ShapeError):
        fc_forward(np.ones(3), np.ones((4, 2)), np.zeros(2))


def test_reference_shape_algebra():
    shapes = spec_shapes(LanSpec(68).subnet_specs(), (57, 57, 3))
    convs_and_pools = [s for s, spec in zip(shapes, LanSpec(68).subnet_specs())
                       if spec.kind in ("conv2d", "maxpool2d", "fc")]
    assert convs_and_pools == [(57, 57, 16), (29, 29, 16), (29, 29, 32), (15, 15, 32),
                               (15, 15, 64), (8, 8, 64), (10,)]


# --- backward --------------------------------------------------------------

def _check_layer_grads(layer, x, rng, tol, h=1e-5):
    r = rng.normal(size=layer.forward(x).shape)

    def loss():
        return float(np.sum(layer.forward(x) * r))

    layer.forward(x)
    dx = layer.backward(r)
    errs = {"input": rel_error(dx, numeric_grad(loss, x, h))}
    for name, p in layer.params.items():
        layer.forward(x)
        layer.backward(r)
        analytic = layer.grads[name].copy()
        errs[name] = rel_error(analytic, numeric_grad(loss, p, h))
    assert max(errs.values()) < tol, errs
    return errs


def test_fc_mse_gradient_tight(rng):
    layer = Dense(5, 3, rng)
    x = rng.normal(size=(4, 5))
    t = rng.normal(size=(4, 3))

    def loss():
        return mse_loss(layer.forward(x), t)[0]

    _, g = mse_loss(layer.forward(x), t)
    layer.backward(g)
    for name, p in layer.params.items():
        assert rel_error(layer.grads[name], numeric_grad(loss, p, 1e-5)) < 1e-6


def test_zero_upstream_gradient_gives_zero_grads(rng):
    net = Sequential([Conv2D((3, 3, 2, 4), 1, 1, rng), MaxPool2D(), ReLU(), Flatten(), Dense(36, 3, rng)])
    net.forward(rng.normal(size=(2, 5, 5, 2)))
    dx = net.backward(np.zeros((2, 3)))
    assert not np.any(dx)
    for _, layer, name in net.named_params():
        assert not np.any(layer.grads[name])


def test_backward_before_forward():
    with pytest.raises(StateError):
        Dense(2, 2).backward(np.zeros((1, 2)))
    with pytest.raises(StateError):
        MaxPool2D().backward(np.zeros((1, 1, 1, 1)))


@pytest.mark.parametrize("seed", range(20))
def test_gradcheck_random_configs(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 4))
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    pad = tuple(int(v) for v in rng.integers(0, 2, size=4))
    h = int(rng.integers(k, 7))
    stride = 1
    conv = Conv2D((k, k, cin, cout), pad, stride, rng)
    _check_layer_grads(conv, rng.normal(size=(2, h, h, cin)), rng, 1e-4)

    x = rng.permutation(2 * h * h * cout).reshape(2, h, h, cout) * 0.1 + rng.uniform(0, 0.01)
    _check_layer_grads(MaxPool2D(), x.astype(float), rng, 1e-4)

    n_in = int(rng.integers(1, 8))
    _check_layer_grads(Dense(n_in, int(rng.integers(1, 8)), rng), rng.normal(size=(3, n_in)), rng, 1e-4)

    x = rng.normal(size=(2, 3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5
    _check_layer_grads(ReLU(), x, rng, 1e-4)


def _smooth_point(spec, h=1e-5):
    # finite differences are only valid away from ReLU kinks and pool ties
    for seed in range(100):
        rng = np.random.default_rng(seed)
        net = Sequential.from_specs(spec.subnet_specs(), rng)
        x = rng.normal(size=(2, spec.patch_size, spec.patch_size, spec.channels))
        rec = []
        net.forward(x, record=rec)
        pooled = [a for layer, a in zip(net.layers, rec) if isinstance(layer, MaxPool2D)]
        if min(float(np.abs(a).min()) for a in pooled) > 10 * h:
            return net, x, rng
    raise AssertionError("no kink-free point found")


def test_gradcheck_reduced_subnetwork():
    net, x, rng = _smooth_point(LanSpec(1, patch_size=9))
    r = rng.normal(size=(2, 10))

    def loss():
        return float(np.sum(net.forward(x) * r))

    net.forward(x)
    dx = net.backward(r)
    worst = rel_error(dx, numeric_grad(loss, x))
    for _, layer, name in net.named_params():
        net.forward(x)
        net.backward(r)
        worst = max(worst, rel_error(layer.grads[name].copy(), numeric_grad(loss, layer.params[name])))
    assert worst < 1e-4


def test_maxpool_routes_to_argmax_and_conserves_sum(rng):
    layer = MaxPool2D()
    x = rng.normal(size=(3, 7, 5, 4))
    out = layer.forward(x)
    d = rng.normal(size=out.shape)
    dx = layer.backward(d)
    assert np.isclose(dx.sum(), d.sum(), rtol=0, atol=1e-12)
    nz = dx != 0
    assert nz.sum() == d.size
    # every nonzero input gradient sits on a value equal to its window max
    assert np.all(np.isin(x[nz], out))


def test_maxpool_ties_route_once():
    layer = MaxPool2D()
    x = np.zeros((1, 3, 3, 1))
    out = layer.forward(x)
    dx = layer.backward(np.ones_like(out))
    assert dx.sum() == out.size
    assert np.count_nonzero(dx) == out.size


# --- optimizer -------------------------------------------------------------

def test_adadelta_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    Adadelta(weight_decay=0.0).step([("p", p, np.zeros(2), True)])
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adadelta_scalar_reference():
    lr, rho, eps = 0.1, 0.95, 1e-6
    eg = (1 - rho) * 1.0
    upd = -lr * math.sqrt(eps + 0.0) / math.sqrt(eps + eg) * 1.0
    p = np.array([0.5])
    Adadelta(lr, rho, eps, weight_decay=0.0).step([("p", p, np.array([1.0]), True)])
    assert p[0] - 0.5 == pytest.approx(upd, rel=1e-12)


def test_adadelta_descends_quadratic():
    x = np.array([0.0])
    opt = Adadelta(lr=0.1, weight_decay=0.0)
    for _ in range(100):
        opt.step([("x", x, 2 * (x - 3.0), True)])
    assert abs(x[0] - 3.0) < 3.0
    assert np.all(opt.square_avg["x"] >= 0) and np.all(opt.acc_delta["x"] >= 0)


def test_weight_decay_skips_biases():
    w, b = np.array([2.0]), np.array([2.0])
    w_ref = np.array([2.0])
    Adadelta(weight_decay=0.5).step([("w", w, np.array([0.0]), True), ("b", b, np.array([0.0]), False)])
    Adadelta(weight_decay=0.0).step([("w", w_ref, np.array([1.0]), True)])
    assert b[0] == 2.0
    assert w[0] == w_ref[0]   # decay 0.5 * 2.0 acts as gradient 1.0


def test_adadelta_rejects_nan_with_path():
    with pytest.raises(NumericError, match="sub0/0.conv2d.weight"):
        Adadelta().step([("sub0/0.conv2d.weight", np.zeros(2), np.array([np.nan, 0.0]), True)])


def test_forward_determinism():
    def run():
        rng = np.random.default_rng(3)
        net = Sequential.from_specs(LanSpec(1, 17).subnet_specs(), rng)
        return net.forward(rng.normal(size=(4, 17, 17, 3)))
    assert run().tobytes() == run().tobytes()


def test_layer_spec_rejects_unknown_kind():
    with pytest.raises(ShapeError):
        LayerSpec("dropout")
