import numpy as np
import pytest

from psfkit.grid import Grid
from psfkit.moments import (ImpulseMoments, SupportEllipsoid, compute_moments, support_ellipsoid,
                            sym2x2_eigvalsh)
from psfkit.operators import BlurOperator, KernelOperator, rotation


def quadrature_moments(op):
    """Dense nodal quadrature of the assembled kernel."""
    Phi = op.kernel_matrix()
    w = op.mass.weights
    xy = op.grid.coords
    V = (w[:, None] * Phi).sum(0)
    V = np.where(V > 0, V, np.nan)
    mu = (w[:, None, None] * Phi[:, :, None] * xy[:, None, :]).sum(0) / V[:, None]
    d = xy[:, None, :] - mu[None, :, :]
    S = np.einsum("j,ji,jia,jib->iab", w, Phi, d, d) / V[:, None, None]
    return V, mu, S


def test_six_transpose_applies(blur17):
    compute_moments(blur17)
    assert blur17.transpose_apply_count == 6 and blur17.apply_count == 0


def test_matches_dense_quadrature(blur17):
    m = compute_moments(blur17)
    V, mu, S = quadrature_moments(blur17)
    v = m.valid
    np.testing.assert_allclose(m.V[v], V[v], rtol=1e-10)
    np.testing.assert_allclose(m.mu[v], mu[v], rtol=1e-10)
    scale = np.abs(S[v]).max()
    assert np.abs(m.Sigma[v] - S[v]).max() <= 1e-10 * scale


def test_boundary_nodes_invalid(blur17):
    m = compute_moments(blur17)
    xy = blur17.grid.coords
    on_bdry = (xy == 0).any(1) | (xy == 1).any(1)
    assert not m.valid[on_bdry].any()
    assert np.all(m.V[on_bdry] == 0)
    assert m.valid[~on_bdry].all()
    # invalid nodes keep their position as mean and a zero covariance
    np.testing.assert_array_equal(m.mu[on_bdry], xy[on_bdry])
    np.testing.assert_array_equal(m.Sigma[on_bdry], 0.0)


def test_narrow_gaussian_is_identity_like():
    g = Grid(33, 33)
    s = 0.3 * g.hx

    def kernel(y, x):
        d = y - x
        return np.exp(-0.5 * (d ** 2).sum(-1) / s ** 2) / (2 * np.pi * s ** 2)

    op = KernelOperator(g, kernel)
    m = compute_moments(op)
    V, mu, S = quadrature_moments(op)
    inner = ((g.coords > 0.1) & (g.coords < 0.9)).all(1)
    np.testing.assert_allclose(m.V[inner], V[inner], rtol=1e-10)
    assert np.allclose(m.mu[inner], g.coords[inner], atol=1e-12)
    assert np.abs(m.Sigma[inner]).max() <= g.hx ** 2


def test_blur_moments_close_to_gaussian(grid33):
    op = BlurOperator(grid33)
    m = compute_moments(op)
    i = grid33.node_index(16, 16)
    x = grid33.coords[i]
    Rm = rotation(np.pi / 2 * x.sum())
    expected = Rm.T @ op.covariance @ Rm
    np.testing.assert_allclose(m.mu[i], x, atol=1e-10)
    np.testing.assert_allclose(m.Sigma[i], expected, rtol=0.02, atol=1e-3 * expected.max())


def test_affine_equivariance():
    base = BlurOperator(Grid(17, 17))
    shift = np.array([2.5, -1.25])
    moved = KernelOperator(Grid(17, 17, shift[0], shift[0] + 1, shift[1], shift[1] + 1),
                           lambda y, x: base.kernel(y - shift, x - shift))
    m0, m1 = compute_moments(base), compute_moments(moved)
    v = m0.valid
    np.testing.assert_array_equal(v, m1.valid)
    np.testing.assert_allclose(m1.mu[v], m0.mu[v] + shift, rtol=0, atol=1e-10)
    np.testing.assert_allclose(m1.Sigma[v], m0.Sigma[v], rtol=1e-7, atol=1e-12)


def test_aspect_ratio_and_v_thresholds():
    g = Grid(17, 17)
    elongated = BlurOperator(g, c1=1e-4, c2=0.05)
    m = compute_moments(elongated, eps_Sigma=0.05)
    lam = m.eigenvalues()
    ok = m.V > m.eps_V * m.V_max
    aspect = np.sqrt(lam[ok, 1] / lam[ok, 0])
    np.testing.assert_array_equal(m.valid[ok], aspect <= 20)
    assert not m.valid.all()


def test_sym2x2_eigvalsh(rng):
    A = rng.standard_normal((50, 2, 2))
    S = A + np.swapaxes(A, 1, 2)
    np.testing.assert_allclose(sym2x2_eigvalsh(S), np.linalg.eigvalsh(S), atol=1e-12)


def test_moments_immutable(blur17):
    m = compute_moments(blur17)
    with pytest.raises(ValueError):
        m.V[0] = 1.0


# -- support ellipsoid ---------------------------------------------------------

def test_isotropic_ellipsoid_is_disk():
    e = SupportEllipsoid(np.zeros(2), 0.04 * np.eye(2), 3.0)
    lengths, _ = e.semi_axes()
    np.testing.assert_allclose(lengths, [0.6, 0.6])
    assert e.contains([[0.6, 0.0]])[0] and not e.contains([[0.61, 0.0]])[0]


def test_diagonal_ellipsoid_axes():
    e = SupportEllipsoid(np.zeros(2), np.diag([4.0, 1.0]), 3.0)
    lengths, vecs = e.semi_axes()
    np.testing.assert_allclose(lengths, [3.0, 6.0])
    np.testing.assert_allclose(np.abs(vecs), np.eye(2)[:, ::-1])
    lo, hi = e.bounding_box()
    np.testing.assert_allclose(hi, [6.0, 3.0])


def test_singular_shape_rejected():
    with pytest.raises(ValueError):
        SupportEllipsoid(np.zeros(2), np.diag([1.0, 0.0]))


def test_support_ellipsoid_invalid_node(blur17):
    m = compute_moments(blur17)
    with pytest.raises(ValueError):
        support_ellipsoid(m, 0)
    e = support_ellipsoid(m, 144)
    assert e.tau == 3.0


def test_center_mass_outside_ellipsoid(grid33):
    op = BlurOperator(grid33)
    m = compute_moments(op)
    i = grid33.node_index(16, 16)
    e = support_ellipsoid(m, i, 3.0)
    col = op.kernel_matrix()[:, i] * op.mass.weights
    outside = col[~e.contains(grid33.coords)].sum() / col.sum()
    assert outside <= 1 / 9
