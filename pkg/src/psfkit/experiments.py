"""Desk-scale experiments. Each writes a CSV plus a JSON manifest."""
import csv
import datetime as _dt
import json
import os
import time

import numpy as np

from .baselines import frobenius_error, randomized_svd
from .config import ExperimentConfig
from .grid import Grid
from .moments import compute_moments, inv2x2
from .packing import NoValidNodesError
from .operators import AdvDiffHessian, BlurOperator, RegularizationOperator
from .pipeline import build_psf, build_psf_preconditioner
from .solver import cluster_fraction, condition_number, generalized_eig_spectrum, pcg

SCHEMA_VERSION = 1
SCHEMAS = {
    "blur_convergence": ["tau", "n_b", "total_impulse_count", "applies_total", "rel_frobenius_error"],
    "apply_compare": ["L", "tol", "psf_applies", "glr_applies", "psf_reached", "glr_reached"],
    "precond_study": ["preconditioner", "pcg_iterations", "condition_number_estimate",
                      "applies_to_build", "cluster_fraction", "converged", "update_rank"],
    "negativity_sweep": ["a", "fraction_valid_nodes", "mean_ellipsoid_quality",
                         "psf_error", "failure_flag"],
}
UNREACHED = -1


class NumericalFailure(RuntimeError):
    pass


def _build_psf(op, n_b, tau, seed, eps_V, eps_Sigma):
    try:
        return build_psf(op, n_b, tau, seed, eps_V, eps_Sigma)
    except NoValidNodesError as exc:
        raise NumericalFailure(f"PSF construction failed: {exc}") from exc


def make_grid(cfg: ExperimentConfig) -> Grid:
    g = cfg.grid
    return Grid(g.nx, g.ny, g.x_min, g.x_max, g.y_min, g.y_max)


def make_blur(cfg: ExperimentConfig, grid=None, **over):
    b = dict(L=cfg.blur.L, a=cfg.blur.a, c1=cfg.blur.c1, c2=cfg.blur.c2)
    b.update(over)
    return BlurOperator(grid or make_grid(cfg), **b)


def make_advdiff(cfg: ExperimentConfig, grid=None):
    a = cfg.advdiff
    grid = grid or make_grid(cfg)
    H = AdvDiffHessian(grid, kappa=a.kappa, T=a.T, n_steps=a.n_steps, omega=a.omega,
                       noise_precision=a.noise)
    return H, RegularizationOperator(grid, gamma=a.gamma, delta=a.delta)


def _write_csv(path, name, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(SCHEMAS[name])
        for r in rows:
            wr.writerow([_fmt(r[k]) for k in SCHEMAS[name]])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_manifest(out_dir, name, cfg, started, extra):
    man = {
        "experiment": name,
        "schema_version": SCHEMA_VERSION,
        "columns": SCHEMAS[name],
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "seed": cfg.solver.seed,
        "wall_time_s": time.perf_counter() - started,
    }
    man.update(extra)
    with open(os.path.join(out_dir, f"{name}.manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(man, fh, indent=2, sort_keys=True, default=_json_default)
    return man


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def psf_errors(op, n_b_list, tau, seed, k_n, c_rbf, eps_V=1e-5, eps_Sigma=0.05):
    """Relative Frobenius errors of the PSF kernel for each batch count.

    One harvest with max(n_b_list) batches serves every prefix, since plans
    are prefix-consistent. n_b = 0 means the zero approximation.
    """
    Phi = op.kernel_matrix()
    top = max(n_b_list)
    psf = _build_psf(op, max(top, 1), tau, seed, eps_V, eps_Sigma)
    counts = np.cumsum([0] + [len(b) for b in psf.plan.batches])
    out = []
    for nb in n_b_list:
        if nb == 0:
            err = 1.0
        else:
            err = frobenius_error(Phi, psf.oracle(k_n, c_rbf, nb).dense())
        out.append({"n_b": int(nb), "total_impulse_count": int(counts[min(nb, len(counts) - 1)]),
                    "applies_total": 6 + int(nb), "rel_frobenius_error": err})
    return out, psf


def run_blur_convergence(cfg: ExperimentConfig, out_dir):
    started = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    grid = make_grid(cfg)
    rows = []
    for tau in cfg.sweep.taus:
        op = make_blur(cfg, grid)
        errs, _ = psf_errors(op, cfg.sweep.n_b_list, tau, cfg.solver.seed, cfg.psf.k_n,
                             cfg.psf.c_rbf, cfg.psf.eps_V, cfg.psf.eps_Sigma)
        for e in errs:
            rows.append({"tau": float(tau), **e})
    _write_csv(os.path.join(out_dir, "blur_convergence.csv"), "blur_convergence", rows)
    write_manifest(out_dir, "blur_convergence", cfg, started, {})
    return rows


def glr_applies_for(op, Phi, tol, max_rank, seed=0, oversample=5):
    """Smallest rank r (by bisection) whose randomized SVD meets tol; (applies, reached)."""

    def err(r):
        return frobenius_error(Phi, randomized_svd(op, r, oversample, seed))

    hi = min(max_rank, op.N - oversample)
    if err(hi) > tol:
        return UNREACHED, False
    lo = 0  # err(0) == 1 > tol
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if err(mid) <= tol:
            hi = mid
        else:
            lo = mid
    before = op.total_applies
    randomized_svd(op, hi, oversample, seed)
    return op.total_applies - before, True


def run_apply_count_comparison(cfg: ExperimentConfig, out_dir):
    started = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    grid = make_grid(cfg)
    rows = []
    for L in cfg.sweep.L_list:
        op = make_blur(cfg, grid, L=L)
        Phi = op.kernel_matrix()
        n_max = max(cfg.sweep.psf_max_batches - 6, 1)
        errs, _ = psf_errors(op, list(range(1, n_max + 1)), cfg.psf.tau, cfg.solver.seed,
                             cfg.psf.k_n, cfg.psf.c_rbf, cfg.psf.eps_V, cfg.psf.eps_Sigma)
        for tol in cfg.sweep.tolerances:
            hit = [e["applies_total"] for e in errs if e["rel_frobenius_error"] <= tol]
            psf_applies = hit[0] if hit else UNREACHED
            glr_applies, glr_ok = glr_applies_for(op, Phi, tol, cfg.sweep.glr_max_rank, cfg.solver.seed)
            rows.append({"L": float(L), "tol": float(tol), "psf_applies": psf_applies,
                         "glr_applies": glr_applies, "psf_reached": bool(hit), "glr_reached": glr_ok})
    _write_csv(os.path.join(out_dir, "apply_compare.csv"), "apply_compare", rows)
    write_manifest(out_dir, "apply_compare", cfg, started, {})
    return rows


def run_preconditioner_study(cfg: ExperimentConfig, out_dir, with_spectrum=True):
    """PCG on (H + R) x = b with NONE, REG and PSF(n_b) preconditioners.

    The system matrix is assembled densely (desk scale) so the reference
    solution and the spectra are exact; PCG still sees only matvecs.
    """
    started = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    grid = make_grid(cfg)
    H, R = make_advdiff(cfg, grid)
    Hd, Rd = H.dense_matrix(), R.dense_matrix()
    A = Hd + Rd
    rng = np.random.default_rng(cfg.solver.seed)
    b = rng.standard_normal(grid.n_nodes)
    x_ref = np.linalg.solve(A, b)
    tol, max_iter = cfg.solver.tol, cfg.solver.max_iter

    def apply_A(v):
        return A @ v

    rows = []
    reports = {}

    def record(name, Pinv, P_for_eigs, applies, rank=0):
        res = pcg(apply_A, Pinv, b, tol, max_iter, reference=x_ref)
        res.to_csv(os.path.join(out_dir, f"pcg_history_{name}.csv"))
        if with_spectrum:
            ev = generalized_eig_spectrum(A, P_for_eigs)
            cond, frac = condition_number(ev), cluster_fraction(ev)
        else:
            cond = frac = float("nan")
        rows.append({"preconditioner": name, "pcg_iterations": res.iterations,
                     "condition_number_estimate": cond, "applies_to_build": applies,
                     "cluster_fraction": frac, "converged": res.converged, "update_rank": rank})

    record("NONE", None, np.eye(grid.n_nodes), 0)
    record("REG", R.solve, Rd, 0)
    n_list = sorted(cfg.sweep.precond_n_b)
    psf = _build_psf(H, max(n_list), cfg.psf.tau, cfg.solver.seed, cfg.psf.eps_V, cfg.psf.eps_Sigma)
    for nb in n_list:
        try:
            P = build_psf_preconditioner(H, R.matrix, nb, tau=cfg.psf.tau, k_n=cfg.psf.k_n,
                                         c_rbf=cfg.psf.c_rbf, n_leaf=cfg.hmatrix.n_leaf,
                                         eps_aca=cfg.hmatrix.eps_aca, k_h_max=cfg.hmatrix.k_h_max,
                                         eps_flip=cfg.spdfix.eps_flip, seed=cfg.solver.seed, psf=psf)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure(f"PSF({nb}) preconditioner: {exc}") from exc
        reports[f"PSF({nb})"] = P.report.to_dict()
        record(f"PSF({nb})", P.solve, P.factor, P.applies_to_build, P.report.update_rank)
    _write_csv(os.path.join(out_dir, "precond_study.csv"), "precond_study", rows)
    write_manifest(out_dir, "precond_study", cfg, started,
                   {"spd_repair": reports, "noise_precision": H.noise_precision,
                    "hessian_applies": H.total_applies})
    return rows


def ellipsoid_quality(op: BlurOperator, m, tau):
    """Per valid node: fraction of quadrature |mass| of the column inside E_x."""
    Phi = op.kernel_matrix()
    w = op.mass.weights
    xy = op.grid.coords
    idx = np.flatnonzero(m.valid)
    out = np.empty(len(idx))
    Sinv = inv2x2(m.Sigma[idx])
    for k0 in range(0, len(idx), 256):
        sl = slice(k0, k0 + 256)
        cols = idx[sl]
        d = xy[:, None, :] - m.mu[cols][None, :, :]
        maha = np.einsum("nki,kij,nkj->nk", d, Sinv[sl], d)
        mass = np.abs(Phi[:, cols]) * w[:, None]
        tot = mass.sum(axis=0)
        out[sl] = np.where(tot > 0, (mass * (maha <= tau ** 2)).sum(axis=0) / np.where(tot > 0, tot, 1), 1.0)
    return idx, out


def run_negativity_robustness(cfg: ExperimentConfig, out_dir):
    started = time.perf_counter()
    os.makedirs(out_dir, exist_ok=True)
    grid = make_grid(cfg)
    rows = []
    interior = ((grid.coords > [grid.x_min, grid.y_min]) & (grid.coords < [grid.x_max, grid.y_max])).all(axis=1)
    for a in cfg.sweep.a_list:
        op = make_blur(cfg, grid, a=a)
        row = {"a": float(a)}
        try:
            m = compute_moments(op, cfg.psf.eps_V, cfg.psf.eps_Sigma)
            row["fraction_valid_nodes"] = float(m.valid[interior].mean())
            if m.n_valid:
                _, q = ellipsoid_quality(op, m, cfg.psf.tau)
                row["mean_ellipsoid_quality"] = float(q.mean())
            else:
                row["mean_ellipsoid_quality"] = float("nan")
            errs, _ = psf_errors(op, [max(cfg.psf.n_b, 1)], cfg.psf.tau, cfg.solver.seed,
                                 cfg.psf.k_n, cfg.psf.c_rbf, cfg.psf.eps_V, cfg.psf.eps_Sigma)
            err = errs[0]["rel_frobenius_error"]
            row["psf_error"] = err
            row["failure_flag"] = not np.isfinite(err) or err >= 1.0
        except (ValueError, NumericalFailure, np.linalg.LinAlgError):
            row.setdefault("fraction_valid_nodes", 0.0)
            row.setdefault("mean_ellipsoid_quality", float("nan"))
            row["psf_error"] = float("nan")
            row["failure_flag"] = True
        rows.append(row)
    _write_csv(os.path.join(out_dir, "negativity_sweep.csv"), "negativity_sweep", rows)
    write_manifest(out_dir, "negativity_sweep", cfg, started, {})
    return rows


EXPERIMENTS = {
    "blur-convergence": run_blur_convergence,
    "apply-compare": run_apply_count_comparison,
    "precond-study": run_preconditioner_study,
    "negativity-sweep": run_negativity_robustness,
}
