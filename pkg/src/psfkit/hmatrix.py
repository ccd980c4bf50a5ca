"""HODLR matrices: geometric cluster tree, ACA construction, algebra and factorization.

Every off-diagonal sibling block is stored as a low-rank pair (U, V) with
block = U V^T; diagonal leaves are dense. All blocks live in the permuted
ordering of the cluster tree; public methods take and return vectors in
the original node ordering.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

DEFAULT_N_LEAF = 64
DEFAULT_EPS_ACA = 1e-5
TRUNC_FACTOR = 0.1  # SVD truncation runs at TRUNC_FACTOR * eps_aca so re-truncating stored factors is lossless
DEFAULT_K_H_MAX = 50


@dataclass(frozen=True)
class ClusterNode:
    start: int
    stop: int
    level: int
    children: tuple = ()

    @property
    def size(self):
        return self.stop - self.start

    @property
    def is_leaf(self):
        return not self.children


@dataclass(frozen=True)
class ClusterTree:
    """Binary tree of contiguous ranges over ``perm``; node 0 is the root."""
    perm: np.ndarray = field(repr=False)
    nodes: tuple = field(repr=False)
    n_leaf: int = DEFAULT_N_LEAF

    @property
    def N(self):
        return len(self.perm)

    @property
    def iperm(self):
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(len(self.perm))
        return inv

    @property
    def depth(self):
        return max(n.level for n in self.nodes) + 1

    def leaves(self):
        return [k for k, n in enumerate(self.nodes) if n.is_leaf]

    def internal(self):
        return [k for k, n in enumerate(self.nodes) if not n.is_leaf]

    def indices(self, k):
        """Original node indices of cluster k."""
        n = self.nodes[k]
        return self.perm[n.start:n.stop]

    def same_as(self, other):
        return (self is other) or (np.array_equal(self.perm, other.perm)
                                   and self.nodes == other.nodes)


def _split(idx, pts):
    """Longest-axis median split by position; the middle point (odd size) goes to the lower half.

    Equal coordinates are ordered by the other axis, then by index, so the split is
    deterministic and always balanced.
    """
    ext = pts.max(axis=0) - pts.min(axis=0)
    axis = int(np.argmax(ext))
    order = np.lexsort((idx, pts[:, 1 - axis], pts[:, axis]))
    h = (len(idx) + 1) // 2
    return idx[order[:h]], idx[order[h:]]


def build_cluster_tree(coords, n_leaf=DEFAULT_N_LEAF) -> ClusterTree:
    """Deterministic geometric cluster tree over points (or a Grid's nodes)."""
    if n_leaf < 1:
        raise ValueError("n_leaf must be >= 1")
    coords = np.asarray(getattr(coords, "coords", coords), dtype=float)
    perm = []
    nodes = []

    def rec(idx, level):
        k = len(nodes)
        nodes.append(None)
        start = len(perm)
        if len(idx) <= n_leaf:
            perm.extend(idx.tolist())
            nodes[k] = ClusterNode(start, len(perm), level)
            return k
        lo, hi = _split(idx, coords[idx])
        a = rec(lo, level + 1)
        b = rec(hi, level + 1)
        nodes[k] = ClusterNode(start, len(perm), level, (a, b))
        return k

    rec(np.arange(len(coords)), 0)
    return ClusterTree(np.asarray(perm, dtype=np.int64), tuple(nodes), int(n_leaf))


# -- low-rank helpers -----------------------------------------------------------

def recompress(U, V, eps, absolute=None):
    """Truncated SVD of U V^T; drops the tail with ||tail||_F <= eps ||UV^T||_F.

    ``absolute`` overrides the threshold on the tail norm.
    """
    m, n, k = U.shape[0], V.shape[0], U.shape[1]
    if k == 0:
        return U, V
    Qu, Ru = np.linalg.qr(U)
    Qv, Rv = np.linalg.qr(V)
    W, s, Zt = np.linalg.svd(Ru @ Rv.T)
    tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]  # tail[r] = ||s[r:]||
    thresh = eps * np.linalg.norm(s) if absolute is None else absolute
    r = int(np.count_nonzero(tail > thresh))
    return (Qu @ W[:, :r]) * s[:r], Qv @ Zt[:r].T


def _truncated_svd(B, eps, k_max):
    if B.size == 0:
        return np.zeros((B.shape[0], 0)), np.zeros((B.shape[1], 0))
    W, s, Zt = np.linalg.svd(B, full_matrices=False)
    tail = np.sqrt(np.cumsum((s ** 2)[::-1]))[::-1]
    r = min(int(np.count_nonzero(tail > eps * np.linalg.norm(s))), k_max)
    return W[:, :r] * s[:r], Zt[:r].T


@dataclass
class AcaResult:
    U: np.ndarray
    V: np.ndarray
    n_entries: int
    capped: bool


def aca(row_fn, col_fn, m, n, eps, k_max, rng, n_check=4):
    """Partial-pivot ACA of an m x n block given row/column evaluators.

    ``row_fn(i)`` returns row i, ``col_fn(j)`` column j. After the classical
    stopping test passes, a few random rows and columns of the residual are
    inspected; a large one becomes the next pivot. This guards against early
    exit on blocks whose non-zeros are clustered (compact-support kernels).
    """
    Us, Vs = [], []
    n_entries = 0
    norm2 = 0.0
    used_r = np.zeros(m, dtype=bool)
    used_c = np.zeros(n, dtype=bool)
    k_max = min(k_max, m, n)

    def res_row(i):
        r = row_fn(i)
        for u, v in zip(Us, Vs):
            r = r - u[i] * v
        return r

    def res_col(j):
        c = col_fn(j)
        for u, v in zip(Us, Vs):
            c = c - v[j] * u
        return c

    def push(u, v):
        nonlocal norm2
        cross = sum((uu @ u) * (vv @ v) for uu, vv in zip(Us, Vs))
        norm2 = max(norm2 + 2 * cross + (u @ u) * (v @ v), 0.0)
        Us.append(u)
        Vs.append(v)

    def step_from_row(i, row):
        """Add the cross through row i; returns (u, v) or None if the row is zero."""
        nonlocal n_entries
        used_r[i] = True
        cand = np.where(used_c, 0.0, np.abs(row))
        j = int(np.argmax(cand))
        if cand[j] == 0.0:
            return None
        v = row / row[j]
        u = res_col(j)
        n_entries += m
        used_c[j] = True
        push(u, v)
        return u, v

    i = 0
    capped = False
    while True:
        # classical ACA sweep
        while len(Us) < k_max and not used_r.all():
            row = res_row(i)
            n_entries += n
            uv = step_from_row(i, row)
            if uv is None:
                free = np.flatnonzero(~used_r)
                if len(free) == 0:
                    break
                i = int(rng.choice(free))
                # give up on the sweep after a run of zero rows; the check below decides
                if np.count_nonzero(used_r) > len(Us) + n_check:
                    break
                continue
            u, v = uv
            if np.linalg.norm(u) * np.linalg.norm(v) <= eps * np.sqrt(norm2):
                break
            cand = np.where(used_r, 0.0, np.abs(u))
            if cand.max() == 0.0:
                free = np.flatnonzero(~used_r)
                if len(free) == 0:
                    break
                i = int(rng.choice(free))
            else:
                i = int(np.argmax(cand))
        if len(Us) >= k_max:
            capped = not (used_r.all() or used_c.all())
            break
        # random residual probes
        fr, fc = np.flatnonzero(~used_r), np.flatnonzero(~used_c)
        rows = rng.choice(fr, size=min(n_check, len(fr)), replace=False) if len(fr) else []
        cols = rng.choice(fc, size=min(n_check, len(fc)), replace=False) if len(fc) else []
        scale_r = m / max(len(rows), 1)
        scale_c = n / max(len(cols), 1)
        worst = None
        for r in rows:
            rr = res_row(r)
            n_entries += n
            if np.sum(rr ** 2) * scale_r > (eps ** 2) * norm2 and np.abs(rr).max() > 0:
                worst = ("r", int(r), rr)
                break
        if worst is None:
            for c in cols:
                cc = res_col(c)
                n_entries += m
                if np.sum(cc ** 2) * scale_c > (eps ** 2) * norm2 and np.abs(cc).max() > 0:
                    worst = ("c", int(c), cc)
                    break
        if worst is None:
            break
        if worst[0] == "r":
            step_from_row(worst[1], worst[2])
        else:
            c, col = worst[1], worst[2]
            used_c[c] = True
            i = int(np.argmax(np.where(used_r, 0.0, np.abs(col))))
            row = res_row(i)
            n_entries += n
            step_from_row(i, row)
        if len(Us) and not used_r.all():
            cand = np.where(used_r, 0.0, np.abs(Us[-1]))
            i = int(np.argmax(cand)) if cand.max() > 0 else int(np.flatnonzero(~used_r)[0])
    U = np.column_stack(Us) if Us else np.zeros((m, 0))
    V = np.column_stack(Vs) if Vs else np.zeros((n, 0))
    return AcaResult(U, V, n_entries, capped)


def aca_full(block, eps, k_max):
    """Full-pivot ACA of an explicit block (validation only; reads every entry)."""
    R = np.array(block, dtype=float)
    m, n = R.shape
    Us, Vs = [], []
    norm2 = 0.0
    for _ in range(min(k_max, m, n)):
        i, j = np.unravel_index(np.argmax(np.abs(R)), R.shape)
        piv = R[i, j]
        if piv == 0.0:
            break
        u, v = R[:, j].copy(), R[i, :] / piv
        norm2 += (u @ u) * (v @ v)
        Us.append(u)
        Vs.append(v)
        R -= np.outer(u, v)
        if np.linalg.norm(u) * np.linalg.norm(v) <= eps * np.sqrt(norm2):
            break
    capped = len(Us) >= min(k_max, m, n) and np.abs(R).max() > 0
    U = np.column_stack(Us) if Us else np.zeros((m, 0))
    V = np.column_stack(Vs) if Vs else np.zeros((n, 0))
    return AcaResult(U, V, m * n, bool(capped))


# -- HODLR matrix ---------------------------------------------------------------

class HodlrMatrix:
    """HODLR matrix over a cluster tree.

    ``leaves[k]`` is the dense block of leaf k; ``offdiag[k] = (U12, V12, U21, V21)``
    for internal node k with children (a, b): block(a, b) = U12 V12^T and
    block(b, a) = U21 V21^T.
    """

    def __init__(self, tree: ClusterTree, leaves, offdiag, eps_aca=DEFAULT_EPS_ACA,
                 k_h_max=DEFAULT_K_H_MAX, entry_count=0, capped=()):
        self.tree = tree
        self.leaves = dict(leaves)
        self.offdiag = dict(offdiag)
        self.eps_aca = float(eps_aca)
        self.k_h_max = int(k_h_max)
        self.entry_count = int(entry_count)
        self.capped = tuple(capped)

    @property
    def N(self):
        return self.tree.N

    @property
    def shape(self):
        return (self.N, self.N)

    def ranks(self):
        return {k: (b[0].shape[1], b[2].shape[1]) for k, b in self.offdiag.items()}

    @property
    def max_rank(self):
        return max((max(r) for r in self.ranks().values()), default=0)

    def _new(self, leaves, offdiag):
        return HodlrMatrix(self.tree, leaves, offdiag, self.eps_aca, self.k_h_max)

    # -- products -----------------------------------------------------------
    def matvec_permuted(self, x):
        y = np.zeros_like(x, dtype=float)
        nodes = self.tree.nodes
        for k, D in self.leaves.items():
            n = nodes[k]
            y[n.start:n.stop] += D @ x[n.start:n.stop]
        for k, (U12, V12, U21, V21) in self.offdiag.items():
            a, b = (nodes[c] for c in nodes[k].children)
            if U12.shape[1]:
                y[a.start:a.stop] += U12 @ (V12.T @ x[b.start:b.stop])
            if U21.shape[1]:
                y[b.start:b.stop] += U21 @ (V21.T @ x[a.start:a.stop])
        return y

    def matvec(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape[0] != self.N:
            raise ValueError("dimension mismatch")
        perm = self.tree.perm
        y = np.empty_like(u, dtype=float)
        y[perm] = self.matvec_permuted(u[perm])
        return y

    __matmul__ = matvec

    def to_dense(self):
        """Assemble the full matrix in the original ordering (desk scale)."""
        N = self.N
        P = np.zeros((N, N))
        nodes = self.tree.nodes
        for k, D in self.leaves.items():
            n = nodes[k]
            P[n.start:n.stop, n.start:n.stop] = D
        for k, (U12, V12, U21, V21) in self.offdiag.items():
            a, b = (nodes[c] for c in nodes[k].children)
            P[a.start:a.stop, b.start:b.stop] = U12 @ V12.T
            P[b.start:b.stop, a.start:a.stop] = U21 @ V21.T
        perm = self.tree.perm
        out = np.empty_like(P)
        out[np.ix_(perm, perm)] = P
        return out

    # -- algebra ------------------------------------------------------------
    def scale(self, alpha):
        alpha = float(alpha)
        return self._new({k: alpha * D for k, D in self.leaves.items()},
                         {k: (alpha * U12, V12, alpha * U21, V21)
                          for k, (U12, V12, U21, V21) in self.offdiag.items()})

    def add(self, other: "HodlrMatrix", eps=None):
        if not self.tree.same_as(other.tree):
            raise ValueError("HODLR add requires identical cluster trees")
        eps = TRUNC_FACTOR * self.eps_aca if eps is None else eps
        leaves = {k: D + other.leaves[k] for k, D in self.leaves.items()}
        off = {}
        for k, (U12, V12, U21, V21) in self.offdiag.items():
            P12, Q12, P21, Q21 = other.offdiag[k]
            a12 = recompress(np.hstack([U12, P12]), np.hstack([V12, Q12]), eps)
            a21 = recompress(np.hstack([U21, P21]), np.hstack([V21, Q21]), eps)
            off[k] = (*a12, *a21)
        return self._new(leaves, off)

    def __add__(self, other):
        return self.add(other)

    def diag_add(self, w):
        """H + diag(w) with w in original ordering; touches leaf blocks only."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.N,):
            raise ValueError("diagonal has wrong length")
        wp = w[self.tree.perm]
        nodes = self.tree.nodes
        leaves = {k: D + np.diag(wp[nodes[k].start:nodes[k].stop]) for k, D in self.leaves.items()}
        return self._new(leaves, dict(self.offdiag))

    def sandwich(self, w):
        """diag(w) H diag(w) with w in original ordering."""
        wp = np.asarray(w, dtype=float)[self.tree.perm]
        nodes = self.tree.nodes
        leaves = {}
        for k, D in self.leaves.items():
            s = wp[nodes[k].start:nodes[k].stop]
            leaves[k] = s[:, None] * D * s[None, :]
        off = {}
        for k, (U12, V12, U21, V21) in self.offdiag.items():
            a, b = (nodes[c] for c in nodes[k].children)
            wa, wb = wp[a.start:a.stop, None], wp[b.start:b.stop, None]
            off[k] = (wa * U12, wb * V12, wb * U21, wa * V21)
        return self._new(leaves, off)

    def transpose(self):
        return self._new({k: D.T.copy() for k, D in self.leaves.items()},
                         {k: (V21, U21, V12, U12) for k, (U12, V12, U21, V21) in self.offdiag.items()})

    @property
    def T(self):
        return self.transpose()

    def symmetrized(self, eps=None):
        """(H + H^T)/2 with off-diagonal blocks that are exact transposes of each other."""
        eps = TRUNC_FACTOR * self.eps_aca if eps is None else eps
        leaves = {k: 0.5 * (D + D.T) for k, D in self.leaves.items()}
        off = {}
        for k, (U12, V12, U21, V21) in self.offdiag.items():
            U, V = recompress(0.5 * np.hstack([U12, V21]), np.hstack([V12, U21]), eps)
            off[k] = (U, V, V, U)
        return self._new(leaves, off)

    # -- storage ------------------------------------------------------------
    def save(self, path):
        """npz layout: perm, node table (start, stop, level, child_a, child_b),
        leaf_<k> dense blocks, and U12_<k>, V12_<k>, U21_<k>, V21_<k> factors."""
        t = self.tree
        table = np.array([[n.start, n.stop, n.level, *(n.children or (-1, -1))] for n in t.nodes],
                         dtype=np.int64)
        arrays = {"perm": t.perm, "nodes": table,
                  "meta": np.array([t.n_leaf, self.eps_aca, self.k_h_max, self.entry_count], dtype=float)}
        for k, D in self.leaves.items():
            arrays[f"leaf_{k}"] = D
        for k, blocks in self.offdiag.items():
            for name, B in zip(("U12", "V12", "U21", "V21"), blocks):
                arrays[f"{name}_{k}"] = B
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        z = np.load(path)
        nodes = tuple(ClusterNode(int(s), int(e), int(lv), () if a < 0 else (int(a), int(b)))
                      for s, e, lv, a, b in z["nodes"])
        n_leaf, eps, kmax, cnt = z["meta"]
        tree = ClusterTree(z["perm"], nodes, int(n_leaf))
        leaves = {k: z[f"leaf_{k}"] for k in tree.leaves()}
        off = {k: tuple(z[f"{nm}_{k}"] for nm in ("U12", "V12", "U21", "V21")) for k in tree.internal()}
        return cls(tree, leaves, off, eps, int(kmax), int(cnt))


def _as_entry_fn(oracle):
    if hasattr(oracle, "node_entries"):
        return oracle.node_entries
    return oracle


def build_hodlr(entry_oracle, tree: ClusterTree, k_h_max=DEFAULT_K_H_MAX,
                eps_aca=DEFAULT_EPS_ACA, seed=0, recompress_blocks=True,
                full_pivot=False) -> HodlrMatrix:
    """Assemble a HODLR approximation from an entry oracle.

    ``entry_oracle(rows, cols)`` returns entries for paired index arrays
    (original ordering); a PsfKernelOracle is accepted directly.
    ``full_pivot`` evaluates every off-diagonal entry; meant for tests.
    """
    f = _as_entry_fn(entry_oracle)
    rng = np.random.default_rng(seed)
    nodes = tree.nodes
    count = 0
    leaves = {}
    for k in tree.leaves():
        I = tree.indices(k)
        R, C = np.meshgrid(I, I, indexing="ij")
        leaves[k] = np.asarray(f(R.ravel(), C.ravel()), dtype=float).reshape(len(I), len(I))
        count += len(I) ** 2
    off = {}
    capped = []
    for k in tree.internal():
        a, b = nodes[k].children
        Ia, Ib = tree.indices(a), tree.indices(b)
        pair = []
        for I, J in ((Ia, Ib), (Ib, Ia)):
            if full_pivot:
                R, C = np.meshgrid(I, J, indexing="ij")
                blk = np.asarray(f(R.ravel(), C.ravel()), dtype=float).reshape(len(I), len(J))
                res = aca_full(blk, eps_aca, k_h_max)
            else:
                res = aca(lambda i, I=I, J=J: np.asarray(f(np.full(len(J), I[i]), J), dtype=float),
                          lambda j, I=I, J=J: np.asarray(f(I, np.full(len(I), J[j])), dtype=float),
                          len(I), len(J), eps_aca, k_h_max, rng)
            count += res.n_entries
            if res.capped:
                capped.append(k)
            U, V = res.U, res.V
            if recompress_blocks:
                U, V = recompress(U, V, TRUNC_FACTOR * eps_aca)
            pair += [U, V]
        off[k] = tuple(pair)
    return HodlrMatrix(tree, leaves, off, eps_aca, k_h_max, count, capped)


def from_dense(M, tree: ClusterTree, eps=DEFAULT_EPS_ACA, k_max=None) -> HodlrMatrix:
    """Compress an explicit matrix (original ordering) by truncated SVD per block."""
    M = np.asarray(M, dtype=float)
    if hasattr(M, "toarray"):
        M = M.toarray()
    k_max = M.shape[0] if k_max is None else k_max
    perm = tree.perm
    P = M[np.ix_(perm, perm)]
    nodes = tree.nodes
    leaves = {k: P[nodes[k].start:nodes[k].stop, nodes[k].start:nodes[k].stop].copy() for k in tree.leaves()}
    off = {}
    for k in tree.internal():
        a, b = (nodes[c] for c in nodes[k].children)
        off[k] = (*_truncated_svd(P[a.start:a.stop, b.start:b.stop], eps, k_max),
                  *_truncated_svd(P[b.start:b.stop, a.start:a.stop], eps, k_max))
    return HodlrMatrix(tree, leaves, off, eps, k_max)


def sandwich_mass(H: HodlrMatrix, mass) -> HodlrMatrix:
    """M H M for a lumped (diagonal) mass."""
    return H.sandwich(getattr(mass, "weights", mass))


def matvec(H, u):
    return H.matvec(u)


def scale(H, alpha):
    return H.scale(alpha)


def add(H1, H2):
    return H1.add(H2)


def diag_add(H, w):
    return H.diag_add(w)


# -- factorization --------------------------------------------------------------

class _LeafFactor:
    def __init__(self, D, level, start, stop, spd):
        self.spd = spd
        if spd:
            try:
                self.f = sla.cho_factor(D, lower=True)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError(
                    f"leaf block [{start}:{stop}) at level {level} is not positive definite") from exc
        else:
            self.f = sla.lu_factor(D)

    def solve(self, b):
        return sla.cho_solve(self.f, b) if self.spd else sla.lu_solve(self.f, b)


class _NodeFactor:
    """Woodbury solve of blkdiag(A11, A22) + Ut Vt^T."""

    def __init__(self, fa, fb, n1, U12, V12, U21, V21, level):
        self.fa, self.fb, self.n1 = fa, fb, n1
        self.k1 = U12.shape[1]
        self.V12, self.V21 = V12, V21
        self.W1 = fa.solve(U12) if self.k1 else U12
        self.W2 = fb.solve(U21) if U21.shape[1] else U21
        k1, k2 = self.k1, U21.shape[1]
        C = np.eye(k1 + k2)
        C[:k1, k1:] += V12.T @ self.W2
        C[k1:, :k1] += V21.T @ self.W1
        self.has_lr = (k1 + k2) > 0
        if self.has_lr:
            self.C = sla.lu_factor(C)
            if np.any(np.abs(np.diag(self.C[0])) < 1e-300):
                raise np.linalg.LinAlgError(f"singular capacitance at level {level}")

    def solve(self, b):
        n1 = self.n1
        z1 = self.fa.solve(b[:n1])
        z2 = self.fb.solve(b[n1:])
        if not self.has_lr:
            return np.concatenate([z1, z2])
        t = np.concatenate([self.V12.T @ z2, self.V21.T @ z1])
        s = sla.lu_solve(self.C, t)
        k1 = self.k1
        return np.concatenate([z1 - self.W1 @ s[:k1], z2 - self.W2 @ s[k1:]])


class HodlrFactorization:
    def __init__(self, H: HodlrMatrix, spd=True):
        self.H = H
        self.spd = spd
        nodes = H.tree.nodes

        def rec(k):
            n = nodes[k]
            if n.is_leaf:
                return _LeafFactor(H.leaves[k], n.level, n.start, n.stop, spd)
            a, b = n.children
            return _NodeFactor(rec(a), rec(b), nodes[a].size, *H.offdiag[k], n.level)

        self._root = rec(0)

    @property
    def N(self):
        return self.H.N

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        perm = self.H.tree.perm
        x = np.empty_like(b)
        x[perm] = self._root.solve(b[perm])
        return x


def factorize(H: HodlrMatrix, spd=True) -> HodlrFactorization:
    """Recursive Woodbury factorization; Cholesky at the leaves when ``spd``."""
    return HodlrFactorization(H, spd)


def solve(F: HodlrFactorization, b):
    return F.solve(b)
