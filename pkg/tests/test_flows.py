import numpy as np
import pytest

from conftest import central_diff
from snflow.flows import ConditionalCouplingFlow, CouplingBlock


def perturbed_flow(rng, dim, cond_dim=0, n_blocks=2, hidden=(8,), scale=0.3):
    flow = ConditionalCouplingFlow.create(dim, cond_dim, n_blocks, hidden, rng=rng)
    flow.set_params(flow.get_params() + scale * rng.standard_normal(flow.n_params))
    return flow


def fd_jacobian(f, x, h=1e-6):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def test_fresh_flow_is_identity(rng):
    flow = ConditionalCouplingFlow.create(5, 2, 3, (16,), rng=rng)
    z = rng.standard_normal((7, 5))
    y = rng.standard_normal((7, 2))
    x, logdet = flow.forward(z, y)
    # permutations still act, but nothing is rescaled
    assert np.all(logdet == 0.0)
    back, _ = flow.inverse(x, y)
    np.testing.assert_array_equal(back, z)


@pytest.mark.parametrize("dim,cond_dim", [(2, 0), (3, 2), (6, 3), (16, 0)])
def test_roundtrip_and_logdet_antisymmetry(rng, dim, cond_dim):
    flow = perturbed_flow(rng, dim, cond_dim)
    z = rng.standard_normal((10, dim))
    y = rng.standard_normal((10, cond_dim)) if cond_dim else None
    x, ld = flow.forward(z, y)
    z2, ld_inv = flow.inverse(x, y)
    np.testing.assert_allclose(z2, z, atol=1e-12)
    np.testing.assert_allclose(ld_inv, -ld, atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3, 5])
def test_logdet_matches_jacobian(rng, dim):
    flow = perturbed_flow(rng, dim, cond_dim=1)
    z = rng.standard_normal(dim)
    y = rng.standard_normal(1)
    jac = fd_jacobian(lambda v: flow.forward(v, y)[0], z)
    _, ld = flow.forward(z, y)
    assert ld == pytest.approx(np.linalg.slogdet(jac)[1], rel=1e-6, abs=1e-8)


def test_single_vector_and_batch_agree(rng):
    flow = perturbed_flow(rng, 4, 2)
    z = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 2))
    xb, ldb = flow.forward(z, y)
    x1, ld1 = flow.forward(z[2], y[2])
    np.testing.assert_allclose(x1, xb[2])
    assert ld1 == pytest.approx(ldb[2])


def test_forward_backward_gradients(rng):
    flow = perturbed_flow(rng, 3, 2)
    z = rng.standard_normal((4, 3))
    y = rng.standard_normal((4, 2))
    wx = rng.standard_normal((4, 3))
    wl = rng.standard_normal(4)

    def scalar(theta, zz=z, yy=y):
        f = perturbed_flow(np.random.default_rng(0), 3, 2)
        f.permutations = flow.permutations
        f.set_params(theta)
        x, ld = f.forward(zz, yy)
        return np.sum(x * wx) + np.sum(ld * wl)

    _, _, cache = flow.forward_cached(z, y)
    gz, gy, gp = flow.backward(cache, wx, wl)
    theta = flow.get_params()
    np.testing.assert_allclose(gp, central_diff(scalar, theta), rtol=1e-5, atol=1e-7)
    fd_z = central_diff(lambda v: scalar(theta, v.reshape(z.shape)), z.ravel())
    np.testing.assert_allclose(gz.ravel(), fd_z, rtol=1e-5, atol=1e-7)
    fd_y = central_diff(lambda v: scalar(theta, z, v.reshape(y.shape)), y.ravel())
    np.testing.assert_allclose(gy.ravel(), fd_y, rtol=1e-5, atol=1e-7)


def test_inverse_backward_gradients(rng):
    flow = perturbed_flow(rng, 4, 1)
    x = rng.standard_normal((3, 4))
    y = rng.standard_normal((3, 1))
    wz = rng.standard_normal((3, 4))
    wl = rng.standard_normal(3)
    theta = flow.get_params()

    def scalar(t, xx=x):
        flow.set_params(t)
        z, ld = flow.inverse(xx, y)
        return np.sum(z * wz) + np.sum(ld * wl)

    fd_p = central_diff(scalar, theta)
    fd_x = central_diff(lambda v: scalar(theta, v.reshape(x.shape)), x.ravel())
    flow.set_params(theta)
    _, _, cache = flow.inverse_cached(x, y)
    gx, _, gp = flow.inverse_backward(cache, wz, wl)
    np.testing.assert_allclose(gp, fd_p, rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(gx.ravel(), fd_x, rtol=1e-5, atol=1e-7)


def test_scale_clamp_bounds_log_scale(rng):
    block = CouplingBlock.create(2, 0, (4,), rng=rng, clamp=0.5)
    block.set_params(50.0 * rng.standard_normal(block.n_params))
    _, ld = block.forward(rng.standard_normal((20, 2)))
    # each half contributes at most |clamp| per coordinate
    assert np.all(np.abs(ld) <= 2 * 0.5 + 1e-12)


def test_one_dimensional_block_rejected(rng):
    with pytest.raises(ValueError):
        CouplingBlock.create(1, 2, (4,), rng=rng)


def test_permutation_validation():
    block = CouplingBlock.create(3, 0, (4,), rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        ConditionalCouplingFlow([np.array([0, 0, 1])], [block])


def test_nonfinite_input_raises(rng):
    flow = perturbed_flow(rng, 2)
    with pytest.raises(FloatingPointError):
        flow.forward(np.array([[np.nan, 0.0]]))
