import numpy as np
import pytest

from pairspec import autodiff as ad
from pairspec import numkit


def finite_diff(fn, x, h=1e-6):
    """Central-difference gradient of a scalar fn at flat array x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fn(up) - fn(dn)) / (2.0 * h)
    return g


def check_op(build, n, seed, tol=1e-7):
    rng = numkit.rng_stream(seed, "autodiff-check")
    x0 = rng.normal(size=n)

    def value(x):
        p = ad.parameter(x)
        return build(p).value.item()

    p = ad.parameter(x0)
    out = build(p)
    out.backward()
    fd = finite_diff(value, x0)
    scale = max(np.abs(fd).max(), 1e-6)
    assert np.abs(p.grad - fd).max() / scale < tol


def test_elementwise_chain():
    check_op(lambda p: ad.tsum(ad.tanh(p) * ad.exp(p * 0.3) + p * p), 6, 1)


def test_log_sqrt_power():
    rng = numkit.rng_stream(2, "autodiff-pos")
    x0 = np.abs(rng.normal(size=5)) + 0.5

    def build(p):
        return ad.tsum(ad.log(p) + ad.sqrt(p) + ad.power(p, 1.7))

    p = ad.parameter(x0)
    build(p).backward()
    fd = finite_diff(lambda x: build(ad.parameter(x)).value.item(), x0)
    assert np.abs(p.grad - fd).max() < 1e-6


def test_matmul_grad():
    rng = numkit.rng_stream(3, "autodiff-mm")
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    a = ad.parameter(a0)
    b = ad.parameter(b0)
    out = ad.tsum(ad.square(a @ b))
    out.backward()

    def fa(flat):
        return ad.tsum(ad.square(ad.parameter(flat.reshape(3, 4)) @ ad.constant(b0))).value.item()

    def fb(flat):
        return ad.tsum(ad.square(ad.constant(a0) @ ad.parameter(flat.reshape(4, 2)))).value.item()

    assert np.abs(a.grad.ravel() - finite_diff(fa, a0.ravel())).max() < 1e-6
    assert np.abs(b.grad.ravel() - finite_diff(fb, b0.ravel())).max() < 1e-6


def test_broadcast_add_unbroadcasts():
    a = ad.parameter(np.zeros((3, 2)))
    b = ad.parameter(np.zeros((1, 2)))
    out = ad.tsum((a + b) * np.arange(6.0).reshape(3, 2))
    out.backward()
    np.testing.assert_allclose(a.grad, np.arange(6.0).reshape(3, 2))
    np.testing.assert_allclose(b.grad, np.arange(6.0).reshape(3, 2).sum(axis=0, keepdims=True))


def test_logsumexp_matches_numpy_and_grad():
    rng = numkit.rng_stream(4, "autodiff-lse")
    x0 = rng.normal(size=(3, 5)) * 3

    def build(p):
        return ad.tsum(ad.logsumexp(p, axis=1))

    p = ad.parameter(x0)
    out = build(p)
    expect = np.log(np.exp(x0).sum(axis=1)).sum()
    assert abs(out.value - expect) < 1e-12
    out.backward()
    fd = finite_diff(
        lambda x: build(ad.parameter(x.reshape(3, 5))).value.item(), x0.ravel()
    )
    assert np.abs(p.grad.ravel() - fd).max() < 1e-6


def test_logsumexp_extreme_values_stable():
    x = ad.constant(np.array([[1000.0, 1000.0], [-1000.0, -999.0]]))
    out = ad.logsumexp(x, axis=1)
    np.testing.assert_allclose(
        out.value, [1000.0 + np.log(2.0), -999.0 + np.log(1 + np.e ** -1)], rtol=1e-12
    )


def test_softplus_sigmoid_grads():
    check_op(lambda p: ad.tsum(ad.softplus(p * 4.0)), 7, 5)
    check_op(lambda p: ad.tsum(ad.sigmoid(p * 2.0)), 7, 6)


def test_softplus_extreme_stable():
    x = ad.constant(np.array([800.0, -800.0]))
    out = ad.softplus(x)
    np.testing.assert_allclose(out.value, [800.0, 0.0], atol=1e-12)


def test_stop_grad_blocks():
    p = ad.parameter(np.array([2.0, 3.0]))
    out = ad.tsum(ad.stop_grad(p) * p)
    out.backward()
    np.testing.assert_allclose(p.grad, [2.0, 3.0])  # only the live factor


def test_where_const_masks_gradient():
    mask = np.array([True, False, True])
    p = ad.parameter(np.array([1.0, 2.0, 3.0]))
    out = ad.tsum(ad.where_const(mask, ad.square(p), 0.0))
    out.backward()
    np.testing.assert_allclose(out.value, 1.0 + 9.0)
    np.testing.assert_allclose(p.grad, [2.0, 0.0, 6.0])


def test_narrow_and_concat_roundtrip():
    x0 = np.arange(12.0).reshape(3, 4)
    p = ad.parameter(x0)
    left = ad.narrow_cols(p, 0, 2)
    right = ad.narrow_cols(p, 2, 4)
    out = ad.tsum(ad.concat_cols([right, left]) * 2.0)
    out.backward()
    np.testing.assert_allclose(p.grad, np.full((3, 4), 2.0))


def test_l2_normalize_rows_unit_norm_and_grad():
    rng = numkit.rng_stream(8, "autodiff-norm")
    x0 = rng.normal(size=(4, 3))
    p = ad.parameter(x0)
    u = ad.l2_normalize(p)
    np.testing.assert_allclose(np.linalg.norm(u.value, axis=1), 1.0, atol=1e-12)
    out = ad.tsum(u * np.arange(12.0).reshape(4, 3))
    out.backward()
    fd = finite_diff(
        lambda x: (
            ad.tsum(
                ad.l2_normalize(ad.parameter(x.reshape(4, 3)))
                * np.arange(12.0).reshape(4, 3)
            ).value.item()
        ),
        x0.ravel(),
    )
    assert np.abs(p.grad.ravel() - fd).max() < 1e-6


def test_shared_subexpression_accumulates_once_per_path():
    p = ad.parameter(np.array([1.5]))
    y = ad.square(p)  # used twice below
    out = ad.tsum(y * 2.0 + y * 3.0)
    out.backward()
    np.testing.assert_allclose(p.grad, [5.0 * 2.0 * 1.5])


def test_backward_requires_scalar():
    p = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        (p * 2.0).backward()


def test_adam_minimizes_quadratic():
    p = ad.parameter(np.array([5.0, -3.0]))
    opt = ad.Adam([p], lr=0.2, total_steps=400)
    for _ in range(400):
        opt.zero_grad()
        loss = ad.tsum(ad.square(p - np.array([1.0, 2.0])))
        loss.backward()
        opt.step()
    np.testing.assert_allclose(p.value, [1.0, 2.0], atol=1e-3)


def test_adam_cosine_schedule_endpoints():
    p = ad.parameter(np.zeros(1))
    opt = ad.Adam([p], lr=0.1, total_steps=10)
    assert abs(opt.current_lr() - 0.1) < 1e-15
    opt.t = 10
    assert abs(opt.current_lr()) < 1e-15
