import itertools

import numpy as np
import pytest

from pairspec import numkit, pospair, tasklab
from pairspec.errors import ShapeError, UnreachableViewError

RT2 = np.sqrt(2.0)


@pytest.fixture
def t3():
    return tasklab.chain_task()


@pytest.fixture
def op3(t3):
    return pospair.build_exact(t3)


def brute_joint(task):
    """Independent oracle: p_plus by direct summation over latents."""
    n = task.views.count
    joint = np.zeros((n, n))
    for z in range(task.n_latents):
        for a1 in range(n):
            for a2 in range(n):
                joint[a1, a2] += task.p_z[z] * task.cond[z, a1] * task.cond[z, a2]
    return joint


def brute_discrepancy(op, g):
    """Independent oracle: enumerate every ordered pair."""
    total = 0.0
    n = op.n_views
    for a1, a2 in itertools.product(range(n), range(n)):
        total += op.joint[a1, a2] * (g[a1] - g[a2]) ** 2
    return total


def test_build_exact_chain_kernel(op3):
    expected = np.array([[2.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 2.0]])
    np.testing.assert_allclose(op3.kernel, expected, atol=1e-14)


def test_build_exact_joint_matches_brute_force(t3, op3):
    np.testing.assert_allclose(op3.joint, brute_joint(t3), atol=1e-15)
    np.testing.assert_allclose(op3.joint.sum(), 1.0, atol=1e-14)
    np.testing.assert_allclose(op3.joint.sum(axis=1), op3.p_a, atol=1e-14)


def test_single_latent_constant_kernel():
    task = tasklab.gen_regions_task(2, 1, [(0, 0, 2, 1)])
    op = pospair.build_exact(task)
    np.testing.assert_allclose(op.kernel, np.ones((2, 2)), atol=1e-14)


def test_deterministic_augmentation_diagonal_kernel():
    # One-hot conditionals: K is diagonal with entries 1 / p(a).
    views = tasklab.EnumeratedViews(count=3, features=np.zeros((3, 1)))
    task = tasklab.FiniteTask(
        p_z=np.array([0.2, 0.3, 0.5]), views=views, cond=np.eye(3)
    )
    op = pospair.build_exact(task)
    np.testing.assert_allclose(op.kernel, np.diag([5.0, 1.0 / 0.3, 2.0]), atol=1e-12)


def test_sym_matrix_chain_values(op3):
    expected = np.array(
        [
            [0.5, 0.25 * RT2, 0.0],
            [0.25 * RT2, 0.5, 0.25 * RT2],
            [0.0, 0.25 * RT2, 0.5],
        ]
    )
    np.testing.assert_allclose(op3.sym, expected, atol=1e-14)


def test_sym_matrix_psd_and_spectrum_bounded():
    rng = numkit.rng_stream(21, "pospair-psd")
    for _ in range(5):
        task = tasklab.random_enumerated_task(5, 12, rng)
        op = pospair.build_exact(task)
        w = numkit.sym_eigh(op.sym).eigenvalues
        assert w.min() >= -1e-10
        assert w.max() <= 1.0 + 1e-10


def test_feature_map_reproduces_kernel(op3):
    np.testing.assert_allclose(
        op3.feature_map.T @ op3.feature_map, op3.kernel, atol=1e-12
    )


def test_feature_map_reproduces_kernel_random():
    rng = numkit.rng_stream(22, "pospair-phi")
    task = tasklab.random_enumerated_task(7, 9, rng)
    op = pospair.build_exact(task)
    np.testing.assert_allclose(op.feature_map.T @ op.feature_map, op.kernel, atol=1e-10)


def test_transition_rows_chain(op3):
    np.testing.assert_allclose(pospair.transition_row(op3, 0), [0.5, 0.5, 0.0])
    np.testing.assert_allclose(pospair.transition_row(op3, 1), [0.25, 0.5, 0.25])
    # Rows are distributions.
    for a in range(3):
        assert pospair.transition_row(op3, a).sum() == pytest.approx(1.0)


def test_transition_detailed_balance():
    rng = numkit.rng_stream(23, "pospair-balance")
    task = tasklab.random_enumerated_task(4, 8, rng)
    op = pospair.build_exact(task)
    flow = op.transition * op.p_a[None, :]  # p(a1) P(a2|a1)
    np.testing.assert_allclose(flow, flow.T, atol=1e-13)


def test_transition_row_out_of_range(op3):
    with pytest.raises(ShapeError):
        pospair.transition_row(op3, 3)


def test_discrepancy_constant_zero(op3):
    assert pospair.discrepancy(op3, np.ones(3)) == pytest.approx(0.0, abs=1e-15)


def test_discrepancy_indicator_brute_force(op3):
    g = np.array([1.0, 0.0, 0.0])
    exact = pospair.discrepancy(op3, g)
    assert exact == pytest.approx(brute_discrepancy(op3, g), abs=1e-14)
    assert exact == pytest.approx(0.25, abs=1e-14)


def test_discrepancy_second_eigenfunction(op3):
    f2 = np.array([-RT2, 0.0, RT2])
    assert pospair.discrepancy(op3, f2) == pytest.approx(1.0, abs=1e-12)


def test_discrepancy_matches_brute_force_random():
    rng = numkit.rng_stream(24, "pospair-disc")
    task = tasklab.random_enumerated_task(3, 7, rng)
    op = pospair.build_exact(task)
    for _ in range(10):
        g = rng.normal(size=7)
        assert pospair.discrepancy(op, g) == pytest.approx(
            brute_discrepancy(op, g), abs=1e-12
        )


def test_discrepancy_shape_check(op3):
    with pytest.raises(ShapeError):
        pospair.discrepancy(op3, np.ones(4))


def test_kernel_eval_matches_matrix(t3, op3):
    for a1 in range(3):
        for a2 in range(3):
            assert pospair.kernel_eval(t3, a1, a2) == pytest.approx(
                op3.kernel[a1, a2], abs=1e-12
            )


def test_kernel_eval_multiset_no_enumeration():
    rng = numkit.rng_stream(25, "pospair-ms")
    task = tasklab.gen_sprite_task(3, 2, 2, rng, copies=2, k=3)
    v1, v2, _ = tasklab.sample_pair(task, rng)
    val = pospair.kernel_eval(task, v1, v2)
    assert np.isfinite(val) and val >= 0.0
    # Symmetric in its arguments.
    assert val == pytest.approx(pospair.kernel_eval(task, v2, v1), rel=1e-12)


def test_kernel_eval_self_pair_single_latent():
    task = tasklab.gen_regions_task(2, 1, [(0, 0, 2, 1)])
    assert pospair.kernel_eval(task, 0, 0) == pytest.approx(1.0, abs=1e-14)


def test_kernel_eval_unreachable_view():
    views = tasklab.EnumeratedViews(count=2, features=np.zeros((2, 1)))
    task = tasklab.FiniteTask(
        p_z=np.array([1.0]), views=views, cond=np.array([[1.0, 0.0]])
    )
    with pytest.raises(UnreachableViewError):
        pospair.kernel_eval(task, 0, 1)


def test_build_exact_rejects_multiset():
    rng = numkit.rng_stream(26, "pospair-reject")
    task = tasklab.gen_sprite_task(3, 1, 2, rng, copies=2, k=2)
    with pytest.raises(ShapeError):
        pospair.build_exact(task)


def test_build_exact_rejects_zero_marginal():
    views = tasklab.EnumeratedViews(count=2, features=np.zeros((2, 1)))
    task = tasklab.FiniteTask(
        p_z=np.array([1.0]), views=views, cond=np.array([[1.0, 0.0]])
    )
    with pytest.raises(UnreachableViewError):
        pospair.build_exact(task)


def test_discrepancy_mc_agrees_with_exact(t3, op3):
    rng = numkit.rng_stream(27, "pospair-mc")
    g = np.array([1.0, 0.0, 0.0])

    def fn(views):
        return g[np.asarray(views, dtype=int)]

    mean, stderr = pospair.discrepancy_mc(t3, fn, 4000, rng)
    exact = pospair.discrepancy(op3, g)
    assert abs(mean - exact) <= 4.0 * stderr
    assert stderr < 0.02


def test_laplacian_identity(op3):
    # Quadratic form of L equals half the pair discrepancy for any g.
    rng = numkit.rng_stream(28, "pospair-lap")
    for _ in range(5):
        g = rng.normal(size=3)
        lhs = 2.0 * g @ op3.laplacian @ g
        assert lhs == pytest.approx(brute_discrepancy(op3, g), abs=1e-12)
