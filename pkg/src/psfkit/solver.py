"""Preconditioned conjugate gradients and generalized eigenvalue diagnostics."""
import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla


@dataclass
class PcgResult:
    x: np.ndarray = field(repr=False)
    iterations: int
    residual_history: list
    error_history: list = None
    energy_error_history: list = None
    converged: bool = False

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            head = ["iteration", "residual"]
            if self.error_history is not None:
                head.append("error")
            wr.writerow(head)
            for k, r in enumerate(self.residual_history):
                row = [k, repr(float(r))]
                if self.error_history is not None:
                    row.append(repr(float(self.error_history[k])))
                wr.writerow(row)


def _as_apply(op):
    if op is None:
        return lambda v: v
    if callable(op) and not hasattr(op, "matvec") and not hasattr(op, "solve"):
        return op
    if hasattr(op, "solve") and not hasattr(op, "matvec"):
        return op.solve
    if hasattr(op, "matvec"):
        return op.matvec
    if hasattr(op, "apply"):
        return op.apply
    M = np.asarray(op)
    return lambda v: M @ v


def check_symmetric(apply_op, n, n_probes=3, tol=1e-8, seed=0):
    """Raise if <P u, w> and <u, P w> differ on random probes."""
    rng = np.random.default_rng(seed)
    for _ in range(n_probes):
        u, w = rng.standard_normal(n), rng.standard_normal(n)
        Pu, Pw = apply_op(u), apply_op(w)
        a, b = Pu @ w, u @ Pw
        scale = max(np.linalg.norm(Pu) * np.linalg.norm(w), np.linalg.norm(Pw) * np.linalg.norm(u), 1e-300)
        if abs(a - b) > tol * scale:
            raise ValueError(f"preconditioner is not symmetric (defect {abs(a - b) / scale:.2e})")


def pcg(apply_A, apply_Pinv, b, tol=1e-6, max_iter=1000, reference=None, x0=None, check_symmetry=True):
    """Preconditioned CG for SPD systems.

    Without ``reference`` the iteration stops once the preconditioned residual
    sqrt(r^T P^{-1} r) falls below ``tol`` times its initial value. With a
    reference solution it stops once ||x_k - x_ref|| <= tol ||x_ref||.
    """
    A = _as_apply(apply_A)
    Pinv = _as_apply(apply_Pinv)
    b = np.asarray(b, dtype=float)
    n = len(b)
    if check_symmetry and apply_Pinv is not None:
        check_symmetric(Pinv, n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A(x)
    z = Pinv(r)
    p = z.copy()
    rz = r @ z
    rz0 = rz
    res_hist = [float(np.linalg.norm(r))]
    err_hist = energy_hist = None
    if reference is not None:
        reference = np.asarray(reference, dtype=float)
        ref_norm = np.linalg.norm(reference)
        e = x - reference
        err_hist = [float(np.linalg.norm(e) / ref_norm)]
        energy_hist = [float(np.sqrt(max(e @ A(e), 0.0)))]

    def done():
        if reference is not None:
            return err_hist[-1] <= tol
        return rz <= (tol ** 2) * rz0 or res_hist[-1] == 0.0

    converged = done()
    it = 0
    while not converged and it < max_iter:
        Ap = A(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise np.linalg.LinAlgError("operator is not positive definite along a search direction")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = Pinv(r)
        rz_new = r @ z
        it += 1
        res_hist.append(float(np.linalg.norm(r)))
        if reference is not None:
            e = x - reference
            err_hist.append(float(np.linalg.norm(e) / ref_norm))
            energy_hist.append(float(np.sqrt(max(e @ A(e), 0.0))))
        if rz_new < 0:
            raise np.linalg.LinAlgError("preconditioner is not positive definite")
        p = z + (rz_new / rz) * p
        rz = rz_new
        converged = done()
    return PcgResult(x, it, res_hist, err_hist, energy_hist, bool(converged))


def _dense(op, n=None):
    if hasattr(op, "to_dense"):
        return op.to_dense()
    if hasattr(op, "dense_matrix"):
        return op.dense_matrix()
    if hasattr(op, "toarray"):
        return op.toarray()
    if callable(op):
        return np.column_stack([op(e) for e in np.eye(n)])
    return np.asarray(op, dtype=float)


def generalized_eig_spectrum(A_op, P, count=None, n=None):
    """Eigenvalues of P^{-1} A in descending order.

    ``P`` is either a matrix-like object (dense path: symmetric-definite
    eigenproblem A u = lam P u) or anything with ``solve`` (applied to the
    columns of A). ``count`` limits the result to the largest eigenvalues and
    switches to ARPACK.
    """
    A = _dense(A_op, n)
    N = A.shape[0]
    if count is not None and count < N - 1:
        solve = P.solve if hasattr(P, "solve") else (lambda v, Pd=_dense(P, N): np.linalg.solve(Pd, v))
        L = spla.LinearOperator((N, N), matvec=lambda v: solve(A @ v))
        lam = spla.eigs(L, k=count, which="LR", return_eigenvectors=False)
        return np.sort(lam.real)[::-1]
    if hasattr(P, "solve"):
        M = P.solve(A)
        lam = np.linalg.eigvals(M).real
    else:
        Pd = _dense(P, N)
        lam = sla.eigh(0.5 * (A + A.T), 0.5 * (Pd + Pd.T), eigvals_only=True)
    return np.sort(lam)[::-1]


def condition_number(eigs):
    eigs = np.asarray(eigs)
    return float(eigs.max() / eigs.min())


def cluster_fraction(eigs, lo=0.5, hi=2.0):
    eigs = np.asarray(eigs)
    return float(np.mean((eigs >= lo) & (eigs <= hi)))
