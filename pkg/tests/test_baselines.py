import numpy as np
import pytest

from psfkit.baselines import frobenius_error, randomized_svd
from psfkit.grid import Grid, lumped_mass
from psfkit.operators import BlurOperator, MatrixOperator


def mass_scaled(grid, Phi):
    w = lumped_mass(grid).weights
    return MatrixOperator(grid, w[:, None] * Phi * w[None, :])


def test_exact_low_rank(rng):
    g = Grid(9, 9)
    Phi = rng.standard_normal((81, 3)) @ rng.standard_normal((3, 81))
    approx = randomized_svd(mass_scaled(g, Phi), 3)
    assert frobenius_error(Phi, approx) <= 1e-10


def test_rank_zero():
    op = BlurOperator(Grid(9, 9))
    approx = randomized_svd(op, 0)
    assert frobenius_error(op.kernel_matrix(), approx) == 1.0
    assert approx.applies_used == 0


@pytest.mark.parametrize("r", [1, 4, 10])
def test_apply_count(r):
    op = BlurOperator(Grid(9, 9))
    approx = randomized_svd(op, r, oversample=5)
    assert approx.applies_used == 2 * (r + 5)
    assert op.total_applies == 2 * (r + 5)


def test_orthonormal_factors():
    approx = randomized_svd(BlurOperator(Grid(11, 11)), 8)
    np.testing.assert_allclose(approx.U.T @ approx.U, np.eye(8), atol=1e-12)
    np.testing.assert_allclose(approx.V.T @ approx.V, np.eye(8), atol=1e-12)
    assert np.all(np.diff(approx.s) <= 0) and approx.s.min() > 0


def test_error_decreases_with_rank():
    op = BlurOperator(Grid(17, 17), L=0.5)
    Phi = op.kernel_matrix()
    errs = [frobenius_error(Phi, randomized_svd(op, r, seed=2)) for r in (5, 10, 20, 40)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_error_near_optimal():
    op = BlurOperator(Grid(17, 17))
    Phi = op.kernel_matrix()
    s = np.linalg.svd(Phi, compute_uv=False)
    r = 15
    best = np.sqrt(np.sum(s[r:] ** 2) / np.sum(s ** 2))
    err = frobenius_error(Phi, randomized_svd(op, r, oversample=10))
    assert best <= err <= 3 * best


def test_frobenius_error_forms(rng):
    A = rng.standard_normal((70, 70))
    assert frobenius_error(A, A) == 0.0
    assert frobenius_error(A, np.zeros_like(A)) == 1.0
    assert frobenius_error(A, lambda X: A @ X) == pytest.approx(0.0, abs=1e-15)
    assert frobenius_error(A, 0.5 * A) == pytest.approx(0.5)


def test_invalid_rank():
    with pytest.raises(ValueError):
        randomized_svd(BlurOperator(Grid(5, 5)), 22)
