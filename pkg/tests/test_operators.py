import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psfkit.grid import Grid
from psfkit.moments import compute_moments
from psfkit.operators import (AdvDiffHessian, BlurOperator, MatrixOperator, RegularizationOperator,
                              blur_kernel_entry)
from psfkit.packing import plan_batches
from psfkit.impulse import harvest_batches


def _g(x):
    return x[0] * (1 - x[0]) * x[1] * (1 - x[1])


def _tangential(p):
    x, y = p[..., 0], p[..., 1]
    return np.stack([np.sin(np.pi * x) * np.cos(np.pi * y), -np.cos(np.pi * x) * np.sin(np.pi * y)], -1)


def _zero_velocity(p):
    return np.zeros(np.shape(p))


# -- blur ----------------------------------------------------------------------

def test_blur_diagonal_is_g(grid9):
    op = BlurOperator(grid9)
    x = np.array([0.3, 0.6])
    assert blur_kernel_entry(op, x, x) == pytest.approx(_g(x), rel=1e-15)


def test_blur_vanishes_for_boundary_source(grid9):
    op = BlurOperator(grid9, a=3.0)
    for x in ([0.0, 0.4], [1.0, 0.2], [0.5, 0.0], [0.3, 1.0]):
        for y in ([0.5, 0.5], [0.1, 0.9]):
            assert blur_kernel_entry(op, y, x) == 0.0


def test_blur_one_sigma_along_rotated_axis(grid9):
    # theta(0.5, 0.5) = pi/2 maps the y offset onto -h1, so the sigma is sqrt(C11)
    op = BlurOperator(grid9, L=1 / 3, c1=0.0025 * 9)
    x = np.array([0.5, 0.5])
    sigma = np.sqrt(op.covariance[0, 0])
    y = x + [0.0, sigma]
    assert blur_kernel_entry(op, y, x) == pytest.approx(_g(x) * np.exp(-0.5), rel=1e-13)


def test_blur_rejects_bad_params(grid9):
    with pytest.raises(ValueError):
        BlurOperator(grid9, L=0.0)


def test_apply_zero_and_columns(grid17):
    op = BlurOperator(grid17)
    np.testing.assert_array_equal(op.apply(np.zeros(op.N)), 0.0)
    w = op.mass.weights
    xy = grid17.coords
    Phi = np.array([[blur_kernel_entry(op, xy[i], xy[j]) for j in range(op.N)] for i in range(op.N)])
    for j in (0, 40, 144, 200):
        e = np.zeros(op.N)
        e[j] = 1.0
        np.testing.assert_allclose(op.apply(e), w * Phi[:, j] * w[j], rtol=1e-13, atol=1e-18)


def test_apply_length_mismatch(grid9):
    op = BlurOperator(grid9)
    with pytest.raises(ValueError):
        op.apply(np.zeros(5))


@pytest.mark.parametrize("a", [0.0, 0.5, 1.0])
def test_blur_nonnegative_for_small_a(grid17, a):
    assert BlurOperator(grid17, a=a).kernel_matrix().min() >= 0.0


def test_blur_negative_for_large_a(grid17):
    assert BlurOperator(grid17, a=3.0).kernel_matrix().min() < 0.0


def test_apply_counting_six_plus_nb(grid17):
    op = BlurOperator(grid17)
    m = compute_moments(op)
    assert (op.apply_count, op.transpose_apply_count) == (0, 6)
    plan = plan_batches(m, 3.0, 4)
    harvest_batches(op, plan, m)
    assert op.total_applies == 6 + 4


# -- advection-diffusion -------------------------------------------------------

@pytest.fixture(scope="module")
def adv9():
    return AdvDiffHessian(Grid(9, 9), kappa=1e-3, T=0.5, n_steps=10, omega=1.0)


def test_adjoint_dot_product(adv9):
    rng = np.random.default_rng(0)
    w = adv9.mass.weights
    for _ in range(5):
        q, v = rng.standard_normal(81), rng.standard_normal(81)
        lhs = (adv9.forward_solve(q) * w) @ v
        rhs = (q * w) @ adv9.adjoint_solve(v)
        assert abs(lhs - rhs) <= 1e-11 * max(abs(lhs), 1.0)


def test_adjoint_of_zero(adv9):
    np.testing.assert_array_equal(adv9.adjoint_solve(np.zeros(81)), 0.0)


def test_hessian_self_adjoint(adv9):
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal(81), rng.standard_normal(81)
    a, b = adv9.apply(u) @ v, adv9.apply(v) @ u
    assert abs(a - b) <= 1e-11 * max(abs(a), 1.0)


def test_hessian_psd(adv9):
    A = adv9.dense_matrix()
    rng = np.random.default_rng(2)
    Q = rng.standard_normal((81, 100))
    rq = np.einsum("ij,ij->j", Q, A @ Q) / np.einsum("ij,ij->j", Q, Q)
    assert rq.min() >= -1e-12 * np.linalg.norm(A, 2)


def test_constants_are_steady_without_flow():
    g = Grid(9, 9)
    op = AdvDiffHessian(g, kappa=1e-2, velocity=_zero_velocity, noise_precision=1.0)
    np.testing.assert_allclose(op.forward_solve(np.ones(81)), 1.0, rtol=1e-13)


def test_no_flow_adjoint_equals_forward(rng):
    g = Grid(9, 9)
    op = AdvDiffHessian(g, kappa=1e-2, velocity=_zero_velocity, noise_precision=1.0)
    q = rng.standard_normal(81)
    np.testing.assert_allclose(op.adjoint_solve(q), op.forward_solve(q), rtol=1e-12, atol=1e-14)


def test_large_diffusion_smooths_toward_mean(rng):
    g = Grid(9, 9)
    op = AdvDiffHessian(g, kappa=10.0, velocity=_zero_velocity, noise_precision=2.0)
    u = rng.standard_normal(81)
    w = op.mass.weights
    mean = (w @ u) / w.sum()
    expected = 2.0 * w * mean
    np.testing.assert_allclose(op.apply(u), expected, atol=1e-6 * np.abs(expected).max())


def test_rejects_bad_config():
    g = Grid(9, 9)
    with pytest.raises(ValueError):
        AdvDiffHessian(g, kappa=0.0)
    with pytest.raises(ValueError, match="CFL"):
        AdvDiffHessian(g, kappa=1e-3, T=10.0, n_steps=1, omega=5.0)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mass_conserved_for_tangential_field(seed):
    g = Grid(11, 11)
    op = AdvDiffHessian(g, kappa=1e-3, T=0.5, n_steps=20, velocity=_tangential, noise_precision=1.0)
    q = np.random.default_rng(seed).random(g.n_nodes)
    w = op.mass.weights
    assert w @ op.forward_solve(q) == pytest.approx(w @ q, rel=1e-10)


def test_rotation_field_monotone():
    g = Grid(17, 17)
    op = AdvDiffHessian(g, kappa=1e-4, T=0.5, n_steps=20, omega=1.0, noise_precision=1.0)
    q = np.ones(g.n_nodes)
    c = op.forward_solve(q)
    assert c.max() <= 1.0 + 1e-12 and c.min() >= 0.0


def test_hat_center_of_mass_rotates():
    # reference: the 65x65 solve; coarse grids approach it at O(h + dt)
    def com(n, steps):
        g = Grid(n, n)
        op = AdvDiffHessian(g, kappa=1e-4, T=0.5, n_steps=steps, omega=1.0, noise_precision=1.0)
        xy = g.coords
        q = np.maximum(0, 1 - np.abs(xy[:, 0] - 0.7) / 0.1) * np.maximum(0, 1 - np.abs(xy[:, 1] - 0.5) / 0.1)
        c = op.forward_solve(q)
        w = op.mass.weights
        return (w * c) @ xy / (w @ c)

    ref = com(65, 80)
    exact = 0.5 + 0.2 * np.array([np.cos(0.5), np.sin(0.5)])
    assert np.linalg.norm(ref - exact) < 1e-3
    assert np.linalg.norm(com(33, 40) - ref) < 2.0 / 32


# -- regularization ------------------------------------------------------------

def test_regularization_spd(grid9):
    R = RegularizationOperator(grid9).dense_matrix()
    np.testing.assert_allclose(R, R.T)
    assert np.linalg.eigvalsh(R).min() > 0


def test_regularization_solve(grid9, rng):
    R = RegularizationOperator(grid9)
    b = rng.standard_normal(81)
    np.testing.assert_allclose(R.apply(R.solve(b)), b, rtol=1e-10, atol=1e-12)


def test_matrix_operator_counters(grid9, rng):
    M = rng.standard_normal((81, 81))
    op = MatrixOperator(grid9, M)
    u = rng.standard_normal(81)
    np.testing.assert_allclose(op.apply_transpose(u), M.T @ u)
    op.apply(u)
    assert (op.apply_count, op.transpose_apply_count, op.total_applies) == (1, 1, 2)
