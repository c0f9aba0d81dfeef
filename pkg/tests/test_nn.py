import numpy as np
import pytest

from conftest import central_diff
from snflow.nn import AdamState, DenseNet, adam_step, load_net, net_backward, net_init, save_net


def test_forward_shapes_single_and_batch(rng):
    net = net_init([3, 5, 2], rng=rng)
    x = rng.standard_normal((4, 3))
    assert net.forward(x).shape == (4, 2)
    np.testing.assert_allclose(net.forward(x[1]), net.forward(x)[1])


def test_hand_computed_forward():
    net = DenseNet([1, 1, 1], [np.array([[2.0]]), np.array([[3.0]])],
                   [np.array([0.5]), np.array([-1.0])])
    assert net.forward(np.array([0.25]))[0] == pytest.approx(3.0 * np.tanh(1.0) - 1.0)


def test_param_roundtrip_order(rng):
    net = net_init([2, 3, 1], rng=rng)
    flat = net.get_params()
    # layer 0 weights row-major, then its bias, then layer 1
    np.testing.assert_array_equal(flat[:6], net.weights[0].ravel())
    np.testing.assert_array_equal(flat[6:9], net.biases[0])
    other = net_init([2, 3, 1], seed=99)
    other.set_params(flat)
    np.testing.assert_array_equal(other.get_params(), flat)


def test_set_params_rejects_bad_input(rng):
    net = net_init([2, 3, 1], rng=rng)
    with pytest.raises(ValueError):
        net.set_params(np.zeros(3))
    bad = net.get_params()
    bad[0] = np.nan
    with pytest.raises(ValueError):
        net.set_params(bad)


@pytest.mark.parametrize("activation", ["tanh", "identity"])
def test_backward_matches_finite_differences(rng, activation):
    net = net_init([3, 6, 4, 2], rng=rng, activation=activation)
    x = rng.standard_normal((5, 3))
    up = rng.standard_normal((5, 2))
    g = net_backward(net, x, up)
    theta = net.get_params()

    def loss_params(t):
        m = net.copy()
        m.set_params(t)
        return np.sum(m.forward(x) * up)

    np.testing.assert_allclose(g.grad_params, central_diff(loss_params, theta), rtol=1e-6,
                               atol=1e-8)
    fd_x = central_diff(lambda v: np.sum(net.forward(v.reshape(x.shape)) * up), x.ravel())
    np.testing.assert_allclose(g.grad_input.ravel(), fd_x, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(net.vjp_input(x, up), g.grad_input)


def test_zero_last_layer_outputs_zero(rng):
    net = net_init([3, 8, 2], rng=rng, zero_last=True)
    assert np.all(net.forward(rng.standard_normal((4, 3))) == 0.0)


def test_adam_first_step_is_lr_times_sign():
    state = AdamState.for_params(3, lr=0.1)
    params, state = adam_step(state, np.zeros(3), np.array([2.0, -0.5, 0.0]))
    # bias-corrected first step: -lr * g / (|g| + eps)
    np.testing.assert_allclose(params, [-0.1, 0.1, 0.0], atol=1e-7)
    assert state.step == 1


def test_adam_minimizes_quadratic():
    target = np.array([1.0, -2.0, 0.5])
    p = np.zeros(3)
    state = AdamState.for_params(3, lr=0.05)
    for _ in range(2000):
        p, state = adam_step(state, p, 2 * (p - target))
    np.testing.assert_allclose(p, target, atol=1e-3)


def test_adam_rejects_nonfinite_gradient():
    state = AdamState.for_params(2)
    with pytest.raises(FloatingPointError):
        adam_step(state, np.zeros(2), np.array([np.inf, 0.0]))


def test_save_load_roundtrip(tmp_path, rng):
    net = net_init([2, 4, 3], rng=rng)
    save_net(net, tmp_path / "net.npz")
    back = load_net(tmp_path / "net.npz")
    x = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(back.forward(x), net.forward(x))
