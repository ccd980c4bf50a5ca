"""Impulse response moments V, mu, Sigma for all nodes from six transpose applies."""
from dataclasses import dataclass, field

import numpy as np

from .grid import Grid, GridFunction

DEFAULT_TAU = 3.0
DEFAULT_EPS_V = 1e-5
DEFAULT_EPS_SIGMA = 1.0 / 20.0


def sym2x2_eigvalsh(S):
    """Ascending eigenvalues of stacked symmetric 2x2 matrices, closed form."""
    a, b, c = S[..., 0, 0], S[..., 0, 1], S[..., 1, 1]
    mid = 0.5 * (a + c)
    rad = np.hypot(0.5 * (a - c), b)
    return np.stack([mid - rad, mid + rad], axis=-1)


def inv2x2(S):
    a, b, c, d = S[..., 0, 0], S[..., 0, 1], S[..., 1, 0], S[..., 1, 1]
    det = a * d - b * c
    return np.stack([np.stack([d, -b], -1), np.stack([-c, a], -1)], -2) / det[..., None, None]


@dataclass(frozen=True)
class ImpulseMoments:
    """Per-node scaling V, mean mu (N, 2) and covariance Sigma (N, 2, 2).

    Nodes failing the V threshold carry mu = node position and Sigma = 0;
    they are never used as sample points.
    """
    grid: Grid
    V: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)
    Sigma: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)
    eps_V: float = DEFAULT_EPS_V
    eps_Sigma: float = DEFAULT_EPS_SIGMA

    @property
    def V_max(self):
        return float(self.V.max())

    @property
    def n_valid(self):
        return int(self.valid.sum())

    def V_function(self):
        return GridFunction(self.grid, self.V)

    def mu_functions(self):
        return GridFunction(self.grid, self.mu[:, 0]), GridFunction(self.grid, self.mu[:, 1])

    def sigma_functions(self):
        return tuple(GridFunction(self.grid, self.Sigma[:, i, j]) for i, j in ((0, 0), (0, 1), (1, 0), (1, 1)))

    def eigenvalues(self):
        return sym2x2_eigvalsh(self.Sigma)


def compute_moments(op, eps_V=DEFAULT_EPS_V, eps_Sigma=DEFAULT_EPS_SIGMA) -> ImpulseMoments:
    """V, mu, Sigma via transpose applies to 1, x, y, x^2, xy, y^2.

    Issues exactly six calls to ``op.apply_transpose``.
    """
    grid = op.grid
    w = op.mass.weights
    x, y = grid.coords[:, 0], grid.coords[:, 1]

    def probe(poly):
        return op.apply_transpose(poly) / w

    V = probe(np.ones_like(x))
    m1, m2 = probe(x), probe(y)
    q11, q12, q22 = probe(x * x), probe(x * y), probe(y * y)

    V_max = V.max()
    ok = V > eps_V * V_max
    safe_V = np.where(ok, V, 1.0)
    mu = np.column_stack([np.where(ok, m1 / safe_V, x), np.where(ok, m2 / safe_V, y)])
    s11 = np.where(ok, q11 / safe_V - mu[:, 0] ** 2, 0.0)
    s12 = np.where(ok, q12 / safe_V - mu[:, 0] * mu[:, 1], 0.0)
    s22 = np.where(ok, q22 / safe_V - mu[:, 1] ** 2, 0.0)
    Sigma = np.stack([np.stack([s11, s12], -1), np.stack([s12, s22], -1)], -2)

    lam = sym2x2_eigvalsh(Sigma)
    with np.errstate(divide="ignore", invalid="ignore"):
        aspect = np.sqrt(lam[:, 1] / lam[:, 0])
    valid = ok & (lam[:, 0] > 0) & (aspect <= 1.0 / eps_Sigma)
    for arr in (V, mu, Sigma, valid):
        arr.setflags(write=False)
    return ImpulseMoments(grid, V, mu, Sigma, valid, eps_V, eps_Sigma)


@dataclass(frozen=True)
class SupportEllipsoid:
    """{x' : (x' - center)^T shape^{-1} (x' - center) <= tau^2}."""
    center: np.ndarray
    shape: np.ndarray
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        lam = np.linalg.eigvalsh(self.shape)
        if not lam[0] > 0:
            raise ValueError("ellipsoid shape must be positive definite")

    def mahalanobis_sq(self, points):
        d = np.atleast_2d(points) - self.center
        return np.einsum("ni,ij,nj->n", d, np.linalg.inv(self.shape), d)

    def contains(self, points):
        return self.mahalanobis_sq(points) <= self.tau ** 2

    def semi_axes(self):
        """(lengths, directions) with lengths ascending; directions are columns."""
        lam, vec = np.linalg.eigh(self.shape)
        return self.tau * np.sqrt(lam), vec

    def bounding_box(self):
        half = self.tau * np.sqrt(np.diag(self.shape))
        return self.center - half, self.center + half


def support_ellipsoid(m: ImpulseMoments, node: int, tau=DEFAULT_TAU) -> SupportEllipsoid:
    if not m.valid[node]:
        raise ValueError(f"node {node} has no valid moments")
    return SupportEllipsoid(m.mu[node].copy(), m.Sigma[node].copy(), float(tau))
