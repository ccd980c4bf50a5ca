"""Matrix-free operators with apply counting.

Operators map primal coefficient vectors to dual vectors. Kernel-based
operators use nodal quadrature with the lumped mass, so ``A = M Phi M``
holds exactly for the assembled matrices.
"""
import threading

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import Grid, lumped_mass


class MatrixFreeOperator:
    """Base class: subclasses implement ``_apply`` and ``_apply_transpose``."""

    symmetric = False

    def __init__(self, grid: Grid):
        self.grid = grid
        self.mass = lumped_mass(grid)
        self.apply_count = 0
        self.transpose_apply_count = 0
        self._lock = threading.Lock()

    @property
    def N(self):
        return self.grid.n_nodes

    @property
    def total_applies(self):
        return self.apply_count + self.transpose_apply_count

    def _check(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.N:
            raise ValueError(f"expected leading dimension {self.N}, got {u.shape}")
        return u

    def apply(self, u):
        u = self._check(u)
        with self._lock:
            self.apply_count += 1
        return self._apply(u)

    def apply_transpose(self, w):
        w = self._check(w)
        with self._lock:
            self.transpose_apply_count += 1
        if self.symmetric:
            return self._apply(w)
        return self._apply_transpose(w)

    def _apply(self, u):
        raise NotImplementedError

    def _apply_transpose(self, w):
        raise NotImplementedError

    def dense_matrix(self):
        """Assembled N x N matrix (oracle; does not touch the counters)."""
        return self._apply(np.eye(self.N))


class MatrixOperator(MatrixFreeOperator):
    """Wraps an explicit matrix. Used as a test double and for oracles."""

    def __init__(self, grid, matrix):
        super().__init__(grid)
        self.matrix = np.asarray(matrix, dtype=float)
        self.symmetric = np.array_equal(self.matrix, self.matrix.T)

    def _apply(self, u):
        return self.matrix @ u

    def _apply_transpose(self, w):
        return self.matrix.T @ w

    def dense_matrix(self):
        return self.matrix.copy()


class KernelOperator(MatrixFreeOperator):
    """Integral operator with an explicit kernel ``kernel(ys, xs)``.

    ``kernel`` takes broadcastable arrays of points (..., 2) and returns the
    kernel values Phi(y, x). ``apply(u)_i = w_i sum_j Phi(p_i, p_j) w_j u_j``.
    """

    def __init__(self, grid, kernel):
        super().__init__(grid)
        self._kernel = kernel
        self._phi = None

    def kernel(self, y, x):
        return self._kernel(np.asarray(y, dtype=float), np.asarray(x, dtype=float))

    def kernel_entry(self, y, x) -> float:
        return float(self.kernel(np.asarray(y)[None, :], np.asarray(x)[None, :])[0])

    def kernel_matrix(self):
        """Dense Phi_ij = Phi(p_i, p_j)."""
        if self._phi is None:
            p = self.grid.coords
            phi = self.kernel(p[:, None, :], p[None, :, :])
            phi.setflags(write=False)
            self._phi = phi
        return self._phi

    def _apply(self, u):
        w = self.mass.weights
        W = w if u.ndim == 1 else w[:, None]
        return W * (self.kernel_matrix() @ (W * u))

    def _apply_transpose(self, v):
        w = self.mass.weights
        W = w if v.ndim == 1 else w[:, None]
        return W * (self.kernel_matrix().T @ (W * v))


def rotation(theta):
    """Stacked 2x2 rotation matrices, shape theta.shape + (2, 2)."""
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


class BlurOperator(KernelOperator):
    """Spatially varying rotated, anisotropic, optionally non-Gaussian blur.

    Phi(y, x) = (1 - a f(y, x)) g(x) exp(-h^T C^{-1} h / 2), with
    h = R(theta(x)) (y - x), theta(x) = (x1 + x2) pi / 2,
    g(x) = x1 (1 - x1) x2 (1 - x2), C = L^2 diag(c1, c2) and
    f = cos(h1 / sqrt(c1 / 2)) sin(h2 / sqrt(c2 / 2)).
    Intended for the unit square; g is evaluated in absolute coordinates.
    """

    def __init__(self, grid, L=1.0, a=0.0, c1=0.0036, c2=0.0144):
        if L <= 0 or c1 <= 0 or c2 <= 0:
            raise ValueError("L, c1, c2 must be positive")
        self.L, self.a, self.c1, self.c2 = float(L), float(a), float(c1), float(c2)
        super().__init__(grid, self._blur_kernel)

    @property
    def covariance(self):
        return self.L ** 2 * np.diag([self.c1, self.c2])

    def _blur_kernel(self, y, x):
        y, x = np.broadcast_arrays(y, x)
        theta = (x[..., 0] + x[..., 1]) * np.pi / 2
        d = y - x
        c, s = np.cos(theta), np.sin(theta)
        h1 = c * d[..., 0] - s * d[..., 1]
        h2 = s * d[..., 0] + c * d[..., 1]
        g = x[..., 0] * (1 - x[..., 0]) * x[..., 1] * (1 - x[..., 1])
        L2 = self.L ** 2
        expo = np.exp(-0.5 * (h1 ** 2 / (L2 * self.c1) + h2 ** 2 / (L2 * self.c2)))
        out = g * expo
        if self.a != 0.0:
            f = np.cos(h1 / np.sqrt(self.c1 / 2)) * np.sin(h2 / np.sqrt(self.c2 / 2))
            out = (1 - self.a * f) * out
        return out


def blur_kernel_entry(op: BlurOperator, y, x) -> float:
    return op.kernel_entry(y, x)


def neumann_stiffness(grid: Grid):
    """5-point finite-volume Laplacian with zero-flux boundary (unit diffusivity).

    Symmetric positive semi-definite, rows sum to zero. Face lengths use the
    dual (lumped-mass) cells, so boundary faces are halved.
    """
    rows, cols, vals = [], [], []
    for i, j, length, dist in _dual_faces(grid):
        c = length / dist
        rows += [i, j, i, j]
        cols += [i, j, j, i]
        vals += [c, c, -c, -c]
    N = grid.n_nodes
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, N))


def _dual_faces(grid: Grid):
    """Yield arrays (i, j, face_length, node_distance) for x- then y-neighbours."""
    nx, ny = grid.nx, grid.ny
    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="xy")
    i = (iy * nx + ix).ravel()
    ly = np.where((iy == 0) | (iy == ny - 1), 0.5, 1.0).ravel() * grid.hy
    yield i, i + 1, ly, grid.hx
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="xy")
    i = (iy * nx + ix).ravel()
    lx = np.where((ix == 0) | (ix == nx - 1), 0.5, 1.0).ravel() * grid.hx
    yield i, i + nx, lx, grid.hy


def _face_geometry(grid: Grid):
    """Per interior dual face: (i, j, unit normal from i to j, centroid, length)."""
    out = []
    nx, ny = grid.nx, grid.ny
    xy = grid.coords
    # x-faces: vertical segments halfway between (ix, iy) and (ix+1, iy)
    ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    i = iy * nx + ix
    cx = xy[i, 0] + 0.5 * grid.hx
    cy = xy[i, 1] + np.where(iy == 0, 0.25 * grid.hy, np.where(iy == ny - 1, -0.25 * grid.hy, 0.0))
    length = np.where((iy == 0) | (iy == ny - 1), 0.5, 1.0) * grid.hy
    out.append((i, i + 1, np.array([1.0, 0.0]), np.column_stack([cx, cy]), length))
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="xy")
    ix, iy = ix.ravel(), iy.ravel()
    i = iy * nx + ix
    cy = xy[i, 1] + 0.5 * grid.hy
    cx = xy[i, 0] + np.where(ix == 0, 0.25 * grid.hx, np.where(ix == nx - 1, -0.25 * grid.hx, 0.0))
    length = np.where((ix == 0) | (ix == nx - 1), 0.5, 1.0) * grid.hx
    out.append((i, i + nx, np.array([0.0, 1.0]), np.column_stack([cx, cy]), length))
    return out


def rotation_velocity(grid: Grid, omega):
    """Rigid rotation about the domain centre: v = omega * (-(y - yc), x - xc)."""
    xc = 0.5 * (grid.x_min + grid.x_max)
    yc = 0.5 * (grid.y_min + grid.y_max)

    def v(p):
        p = np.asarray(p, dtype=float)
        return omega * np.stack([-(p[..., 1] - yc), p[..., 0] - xc], axis=-1)
    return v


def _boundary_faces(grid: Grid):
    """Per boundary dual-face half: (node, outward normal, centroid, length)."""
    xy = grid.coords
    out = []
    for side, normal in (("x0", (-1.0, 0.0)), ("x1", (1.0, 0.0)), ("y0", (0.0, -1.0)), ("y1", (0.0, 1.0))):
        if side[0] == "x":
            ix = 0 if side == "x0" else grid.nx - 1
            nodes = ix + grid.nx * np.arange(grid.ny)
            h, axis, n_along = grid.hy, 1, grid.ny
        else:
            iy = 0 if side == "y0" else grid.ny - 1
            nodes = iy * grid.nx + np.arange(grid.nx)
            h, axis, n_along = grid.hx, 0, grid.nx
        k = np.arange(n_along)
        for sgn, has in ((-1.0, k > 0), (1.0, k < n_along - 1)):
            i = nodes[has]
            c = xy[i].copy()
            c[:, axis] += sgn * 0.25 * h
            out.append((i, np.array(normal), c, np.full(len(i), 0.5 * h)))
    return out


def upwind_flux_matrix(grid: Grid, velocity):
    """First-order upwind outflow matrix D for ``W dc/dt = -D c``.

    Interior dual faces exchange mass between neighbours (face fluxes are
    exact for linear fields). On the boundary, outflow leaves the domain and
    inflow carries zero concentration, so the scheme stays monotone when the
    field is not tangential there.
    """
    rows, cols, vals = [], [], []
    for i, j, normal, centroid, length in _face_geometry(grid):
        F = (velocity(centroid) @ normal) * length
        up = np.where(F > 0, i, j)
        down = np.where(F > 0, j, i)
        a = np.abs(F)
        rows += [up, down]
        cols += [up, up]
        vals += [a, -a]
    for i, normal, centroid, length in _boundary_faces(grid):
        F = np.maximum((velocity(centroid) @ normal) * length, 0.0)
        rows.append(i)
        cols.append(i)
        vals.append(F)
    N = grid.n_nodes
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(N, N))


def checkerboard(grid: Grid, n_checks=4):
    xy = grid.coords
    u = (xy[:, 0] - grid.x_min) / (grid.x_max - grid.x_min)
    v = (xy[:, 1] - grid.y_min) / (grid.y_max - grid.y_min)
    cx = np.minimum(np.floor(u * n_checks), n_checks - 1)
    cy = np.minimum(np.floor(v * n_checks), n_checks - 1)
    return ((cx + cy) % 2).astype(float)


class AdvDiffHessian(MatrixFreeOperator):
    """Gauss-Newton data-misfit Hessian of initial-condition inversion.

    The parameter-to-observable map F sends an initial condition q to the
    state at time T of ``c_t - kappa Lap c + v . grad c = 0`` with zero-flux
    boundary. Each step is explicit upwind advection followed by implicit
    Euler diffusion. The Hessian is ``noise_precision * F^T W F``.
    """

    symmetric = True

    def __init__(self, grid, kappa=3.2e-4, T=0.5, n_steps=40, omega=0.25,
                 noise_precision=None, velocity=None):
        if kappa <= 0:
            raise ValueError("kappa must be positive")
        if T <= 0 or n_steps < 1:
            raise ValueError("T and n_steps must be positive")
        super().__init__(grid)
        self.kappa, self.T, self.n_steps, self.omega = float(kappa), float(T), int(n_steps), float(omega)
        self.dt = self.T / self.n_steps
        self.velocity = velocity if velocity is not None else rotation_velocity(grid, self.omega)
        w = self.mass.weights
        D = upwind_flux_matrix(grid, self.velocity)
        courant = self.dt * D.diagonal() / w
        if courant.max() > 1.0 + 1e-12:
            raise ValueError(f"advective CFL violated: max courant {courant.max():.3f} > 1; "
                             f"increase n_steps")
        self.max_courant = float(courant.max())
        self._adv = (sp.identity(self.N, format="csr") - self.dt * sp.diags(1.0 / w) @ D).tocsr()
        self._adv_T = self._adv.T.tocsr()
        K = neumann_stiffness(grid)
        self.stiffness = K
        self._implicit = spla.splu((sp.diags(w) + self.dt * self.kappa * K).tocsc())
        if noise_precision is None:
            obs = self.forward_solve(checkerboard(grid))
            noise_precision = 1.0 / (0.05 * np.abs(obs).max()) ** 2
        if noise_precision <= 0:
            raise ValueError("noise_precision must be positive")
        self.noise_precision = float(noise_precision)

    def _diffuse(self, c):
        w = self.mass.weights
        W = w if c.ndim == 1 else w[:, None]
        return self._implicit.solve(W * c)

    def forward_solve(self, q):
        """State at time T for initial condition q (coefficients -> coefficients)."""
        c = np.array(q, dtype=float)
        for _ in range(self.n_steps):
            c = self._diffuse(self._adv @ c)
        return c

    def adjoint_solve(self, w_vec):
        """Mass-weighted adjoint of ``forward_solve``: <F q, w>_M = <q, F* w>_M."""
        w = self.mass.weights
        W = w if np.ndim(w_vec) == 1 else w[:, None]
        v = W * np.asarray(w_vec, dtype=float)
        for _ in range(self.n_steps):
            v = W * self._implicit.solve(v)
            v = self._adv_T @ v
        return v / W

    def _apply(self, u):
        w = self.mass.weights
        W = w if u.ndim == 1 else w[:, None]
        return self.noise_precision * W * self.adjoint_solve(self.forward_solve(u))

    def forward_matrix(self):
        return self.forward_solve(np.eye(self.N))

    def dense_matrix(self):
        F = self.forward_matrix()
        A = self.noise_precision * F.T @ (self.mass.weights[:, None] * F)
        return 0.5 * (A + A.T)


class RegularizationOperator(MatrixFreeOperator):
    """R = delta * W + gamma * K with K the zero-flux 5-point stiffness."""

    symmetric = True

    def __init__(self, grid, gamma=1e-4, delta=1e-4):
        if gamma <= 0 or delta <= 0:
            raise ValueError("gamma and delta must be positive")
        super().__init__(grid)
        self.gamma, self.delta = float(gamma), float(delta)
        self.matrix = (self.delta * sp.diags(self.mass.weights)
                       + self.gamma * neumann_stiffness(grid)).tocsc()
        self._lu = None

    def _apply(self, u):
        return self.matrix @ u

    def solve(self, b):
        if self._lu is None:
            self._lu = spla.splu(self.matrix)
        return self._lu.solve(np.asarray(b, dtype=float))

    def dense_matrix(self):
        return self.matrix.toarray()
