"""Approximate kernel entries from impulse response batches.

For a pair (y, x) the k_n sample points x_i nearest to x give candidate
values f_i = V(x) eta_b(z_i) at z_i = y - mu(x) + mu(x_i) (zero outside the
support ellipsoid of x_i). Neighbours whose z_i leaves the domain are
dropped, and the remaining (x_i, f_i) are interpolated at x with Gaussian
radial basis functions scaled by the diameter of the retained set.
"""
import numpy as np

from .impulse import ImpulseBatchSet
from .moments import inv2x2

DEFAULT_K_N = 10
C_RBF_BLUR = 0.5
C_RBF_HESSIAN = 3.0
_CHUNK = 100_000


class PsfKernelOracle:
    """Evaluator of the PSF kernel approximation.

    ``entries`` is vectorized over pairs; ``node_block`` tabulates the
    kernel at node pairs, which is what the hierarchical matrix needs.
    Results are deterministic functions of the inputs.
    """

    def __init__(self, batches: ImpulseBatchSet, k_n=DEFAULT_K_N, c_rbf=C_RBF_BLUR, shift=1e-12):
        if k_n < 1:
            raise ValueError("k_n must be at least 1")
        if c_rbf <= 0:
            raise ValueError("c_rbf must be positive")
        plan = batches.plan
        if plan.n_points == 0:
            raise ValueError("no sample points")
        self.batches = batches
        self.k_n = int(min(k_n, plan.n_points))
        self.c_rbf = float(c_rbf)
        self.shift = float(shift)
        self.grid = batches.grid
        m = batches.moments
        self.moments = m
        self._plan = plan
        self._nodes = plan.points
        self._bids = plan.batch_ids
        self._xs = self.grid.coords[self._nodes]
        self._mu_s = m.mu[self._nodes]
        self._Sinv_s = inv2x2(m.Sigma[self._nodes])
        self._tau2 = plan.tau ** 2
        self._etas = batches.etas
        self._node_nbrs = None
        self.n_evaluations = 0

    # -- neighbour bookkeeping -------------------------------------------------
    def node_neighbors(self):
        """(N, k_n) positions of the nearest sample points of every node."""
        if self._node_nbrs is None:
            pos, _ = self._plan.nearest(self.grid.coords, self.k_n)
            self._node_nbrs = pos
        return self._node_nbrs

    # -- public evaluation -----------------------------------------------------
    def kernel_entry(self, y, x) -> float:
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        return float(self.entries(y[None, :], x[None, :])[0])

    def entries(self, ys, xs):
        """Phi_tilde(y_p, x_p) for arrays of points, shape (P, 2) each."""
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys, xs = np.broadcast_arrays(ys, xs)
        if not (self.grid.contains(ys).all() and self.grid.contains(xs).all()):
            raise ValueError("kernel evaluation points must lie in the domain")
        ux, inv = np.unique(xs, axis=0, return_inverse=True)
        inv = inv.ravel()
        pos, _ = self._plan.nearest(ux, self.k_n)
        mu_x = np.column_stack([self.grid.interpolate(self.moments.mu[:, 0], ux),
                                self.grid.interpolate(self.moments.mu[:, 1], ux)])
        V_x = self.grid.interpolate(self.moments.V, ux)
        return self._evaluate(ys, inv, ux, pos, mu_x, V_x)

    def node_entries(self, rows, cols):
        """Phi_tilde(p_rows[t], p_cols[t]) for index arrays of equal length."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        ucols, inv = np.unique(cols, return_inverse=True)
        nb = self.node_neighbors()[ucols]
        xy = self.grid.coords
        return self._evaluate(xy[rows], inv.ravel(), xy[ucols], nb,
                              self.moments.mu[ucols], self.moments.V[ucols])

    def node_block(self, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        R, C = np.meshgrid(rows, cols, indexing="ij")
        return self.node_entries(R, C).reshape(len(rows), len(cols))

    def dense(self):
        """Full N x N tabulation at node pairs (desk scale only)."""
        N = self.grid.n_nodes
        out = np.empty((N, N))
        step = max(1, _CHUNK // N)
        for j0 in range(0, N, step):
            cols = np.arange(j0, min(N, j0 + step))
            out[:, cols] = self.node_block(np.arange(N), cols)
        return out

    # -- core -----------------------------------------------------------------
    def _evaluate(self, ys, xkey, ux, pos, mu_x, V_x):
        P = len(ys)
        self.n_evaluations += P
        out = np.zeros(P)
        for a in range(0, P, _CHUNK):
            sl = slice(a, min(P, a + _CHUNK))
            out[sl] = self._evaluate_chunk(ys[sl], xkey[sl], ux, pos, mu_x, V_x)
        return out

    def _evaluate_chunk(self, ys, xkey, ux, pos, mu_x, V_x):
        k = pos.shape[1]
        p = pos[xkey]                                     # (P, k) sample positions
        z = ys[:, None, :] - mu_x[xkey][:, None, :] + self._mu_s[p]
        zf = z.reshape(-1, 2)
        cx, cy, s, t, inside = self.grid.locate(zf)
        inside = inside.reshape(p.shape)
        d = z - self._mu_s[p]
        maha = np.einsum("pki,pkij,pkj->pk", d, self._Sinv_s[p], d)
        active = inside & (maha <= self._tau2)
        f = np.zeros(p.shape)
        if active.any():
            b = np.broadcast_to(self._bids[p], p.shape)[active]
            flat = np.flatnonzero(active.ravel())
            i00 = cy[flat] * self.grid.nx + cx[flat]
            ss, tt = s[flat], t[flat]
            E = self._etas
            val = ((1 - ss) * (1 - tt) * E[b, i00] + ss * (1 - tt) * E[b, i00 + 1]
                   + (1 - ss) * tt * E[b, i00 + self.grid.nx] + ss * tt * E[b, i00 + self.grid.nx + 1])
            f[active] = val
        f *= V_x[xkey][:, None]

        result = np.zeros(len(ys))
        live = np.flatnonzero(np.any(f != 0.0, axis=1))
        if len(live) == 0:
            return result
        bits = (inside[live].astype(np.int64) << np.arange(k, dtype=np.int64)).sum(axis=1)
        key = xkey[live].astype(np.int64) * (np.int64(1) << k) + bits
        ukey, ginv = np.unique(key, return_inverse=True)
        gx = ukey >> k
        gmask = ((ukey[:, None] >> np.arange(k)) & 1).astype(bool)
        weights = self._rbf_weights(ux[gx], pos[gx], gmask)   # (G, k)
        result[live] = np.einsum("pk,pk->p", f[live], weights[ginv.ravel()])
        return result

    def _rbf_weights(self, x, pos, mask):
        """w = B^{-1} phi(|x - x_i|) over the retained neighbours; zero elsewhere."""
        pts = self._xs[pos]                                       # (G, k, 2)
        D = np.linalg.norm(pts[:, :, None, :] - pts[:, None, :, :], axis=-1)
        pair = mask[:, :, None] & mask[:, None, :]
        r0 = np.where(pair, D, 0.0).max(axis=(1, 2))
        scale = np.where(r0 > 0, self.c_rbf / np.where(r0 > 0, r0, 1.0), 0.0)
        B = np.exp(-0.5 * (scale[:, None, None] * D) ** 2)
        B = np.where(pair, B, 0.0)
        eye = np.eye(pos.shape[1], dtype=bool)[None]
        B = np.where(eye & ~mask[:, :, None], 1.0, B)
        B = B + self.shift * np.eye(pos.shape[1])[None] * mask[:, :, None]
        rhs = np.exp(-0.5 * (scale[:, None] * np.linalg.norm(pts - x[:, None, :], axis=-1)) ** 2)
        rhs = np.where(mask, rhs, 0.0)
        Lc = np.linalg.cholesky(B)
        tmp = np.linalg.solve(Lc, rhs[..., None])
        w = np.linalg.solve(np.swapaxes(Lc, -1, -2), tmp)[..., 0]
        # at a retained centre the interpolant is its datum; skip the shift's bias
        hit = mask & np.all(pts == x[:, None, :], axis=-1)
        on = hit.any(axis=1)
        if on.any():
            first = hit[on] & (np.cumsum(hit[on], axis=1) == 1)
            w[on] = first.astype(float)
        return np.where(mask, w, 0.0)


def kernel_entry(oracle: PsfKernelOracle, y, x) -> float:
    return oracle.kernel_entry(y, x)


def column_error(oracle: PsfKernelOracle, op, x) -> float:
    """Mass-weighted relative L2 error of the kernel column at x over all nodes."""
    x = np.asarray(x, dtype=float)
    ys = oracle.grid.coords
    exact = op.kernel(ys, x[None, :])
    approx = oracle.entries(ys, np.broadcast_to(x, ys.shape))
    w = op.mass.weights
    nrm = np.sqrt(w @ exact ** 2)
    if nrm == 0.0:
        return 0.0
    return float(np.sqrt(w @ (exact - approx) ** 2) / nrm)
