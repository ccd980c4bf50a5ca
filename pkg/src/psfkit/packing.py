"""Greedy ellipsoid packing of sample points into non-overlapping batches."""
import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

from .moments import DEFAULT_TAU, ImpulseMoments, SupportEllipsoid, inv2x2

_GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


def _separation_K(s, d, A1, A2):
    """K(s) = 1 - d^T (A1/(1-s) + A2/s)^{-1} d, vectorized over leading axes."""
    M = A1 / (1 - s)[..., None, None] + A2 / s[..., None, None]
    Minv = inv2x2(M)
    return 1.0 - np.einsum("...i,...ij,...j->...", d, Minv, d)


def min_separation(d, A1, A2, xtol=1e-10):
    """Minimum over s in (0, 1) of the convex function K(s), by golden section.

    ``A1, A2`` are the full ellipsoid shape matrices (tau^2 Sigma). The
    ellipsoids are disjoint iff the minimum is negative.
    """
    d = np.asarray(d, dtype=float)
    A1 = np.broadcast_to(A1, d.shape[:-1] + (2, 2))
    A2 = np.broadcast_to(A2, d.shape[:-1] + (2, 2))
    lo = np.full(d.shape[:-1], 1e-12)
    hi = np.full(d.shape[:-1], 1.0 - 1e-12)
    c = hi - _GOLDEN * (hi - lo)
    e = lo + _GOLDEN * (hi - lo)
    fc = _separation_K(c, d, A1, A2)
    fe = _separation_K(e, d, A1, A2)
    while np.max(hi - lo) > xtol:
        left = fc < fe
        hi = np.where(left, e, hi)
        lo = np.where(left, lo, c)
        new_c = hi - _GOLDEN * (hi - lo)
        new_e = lo + _GOLDEN * (hi - lo)
        # reuse the surviving interior point
        c_next = np.where(left, new_c, e)
        e_next = np.where(left, c, new_e)
        fc_next = np.where(left, np.nan, fe)
        fe_next = np.where(left, fc, np.nan)
        need_c = left
        need_e = ~left
        if need_c.any():
            fc_next[need_c] = _separation_K(c_next[need_c], d[need_c], A1[need_c], A2[need_c])
        if need_e.any():
            fe_next[need_e] = _separation_K(e_next[need_e], d[need_e], A1[need_e], A2[need_e])
        c, e, fc, fe = c_next, e_next, fc_next, fe_next
    return np.minimum(fc, fe)


def any_intersect(d, A1, A2):
    """True iff any ellipsoid pair (rows of d, A1, A2) intersects.

    Cheap sufficient tests run first: the centre segment is covered by the
    two ellipsoids (intersect), or K at the midpoint is negative (disjoint).
    Undecided pairs go through the full minimization.
    """
    d = np.asarray(d, dtype=float)
    A1 = np.broadcast_to(A1, d.shape[:-1] + (2, 2))
    A2 = np.broadcast_to(A2, d.shape[:-1] + (2, 2))
    dd = np.einsum("...i,...i->...", d, d)
    if np.any(dd == 0.0):
        return True
    r1 = 1.0 / np.sqrt(np.einsum("...i,...ij,...j->...", d, inv2x2(A1), d) / dd)
    r2 = 1.0 / np.sqrt(np.einsum("...i,...ij,...j->...", d, inv2x2(A2), d) / dd)
    if np.any(r1 + r2 >= np.sqrt(dd)):
        return True
    open_ = _separation_K(np.full(dd.shape, 0.5), d, A1, A2) >= 0.0
    if not open_.any():
        return False
    return bool(np.any(min_separation(d[open_], A1[open_], A2[open_]) >= 0.0))


def _check_spd(S):
    S = np.asarray(S, dtype=float)
    if not np.allclose(S, S.T) or np.linalg.eigvalsh(S)[0] <= 0:
        raise ValueError("ellipsoid shape must be symmetric positive definite")


def ellipsoids_intersect(e1: SupportEllipsoid, e2: SupportEllipsoid) -> bool:
    """True iff the two closed ellipsoids share a point."""
    _check_spd(e1.shape)
    _check_spd(e2.shape)
    lo1, hi1 = e1.bounding_box()
    lo2, hi2 = e2.bounding_box()
    if np.any(hi1 < lo2) or np.any(hi2 < lo1):
        return False
    return bool(intersection_margin(e1, e2) >= 0.0)


def intersection_margin(e1: SupportEllipsoid, e2: SupportEllipsoid) -> float:
    """min_s K(s): negative means disjoint, non-negative means intersecting."""
    A1 = e1.tau ** 2 * np.asarray(e1.shape, dtype=float)
    A2 = e2.tau ** 2 * np.asarray(e2.shape, dtype=float)
    d = np.asarray(e2.center, dtype=float) - np.asarray(e1.center, dtype=float)
    return float(min_separation(d[None, :], A1[None], A2[None])[0])


class NoValidNodesError(ValueError):
    """No node passed the moment validity tests, so no sample point can be placed."""


@dataclass
class SampleBatchPlan:
    """Ordered batches of node indices; points keep their batch id."""
    coords: np.ndarray = field(repr=False)  # node coordinates of the whole grid
    batches: list
    tau: float = DEFAULT_TAU
    seed: int = 0

    @cached_property
    def points(self) -> np.ndarray:
        """Flattened sample node indices in batch order."""
        return np.array([i for b in self.batches for i in b], dtype=np.int64)

    @cached_property
    def batch_ids(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.batches) for _ in b], dtype=np.int64)

    @property
    def all_points(self):
        return list(zip(self.points.tolist(), self.batch_ids.tolist()))

    @property
    def n_batches(self):
        return len(self.batches)

    @property
    def n_points(self):
        return len(self.points)

    @cached_property
    def kdtree(self):
        if self.n_points == 0:
            raise ValueError("plan has no sample points")
        return cKDTree(self.coords[self.points])

    def truncate(self, n_batches):
        """Plan holding only the first ``n_batches`` batches."""
        return SampleBatchPlan(self.coords, [list(b) for b in self.batches[:n_batches]], self.tau, self.seed)

    def to_dict(self):
        return {"tau": self.tau, "seed": self.seed,
                "batches": [[int(i) for i in b] for b in self.batches]}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d, coords):
        return cls(np.asarray(coords), [list(b) for b in d["batches"]], float(d["tau"]), int(d["seed"]))

    def nearest(self, points, k):
        """Positions (into ``self.points``) and distances of the k nearest sample points.

        Ties are broken by smaller node index. Returns arrays of shape (P, k').
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        m = self.n_points
        k = min(k, m)
        kk = min(m, k + 4)
        dist, pos = self.kdtree.query(pts, k=kk)
        dist = dist.reshape(len(pts), kk)
        pos = pos.reshape(len(pts), kk)
        order = np.lexsort((self.points[pos], dist), axis=-1)
        dist = np.take_along_axis(dist, order, -1)
        pos = np.take_along_axis(pos, order, -1)
        if kk < m:
            # ties may straddle the query cut-off; redo those rows exhaustively
            bad = dist[:, k - 1] >= dist[:, kk - 1]
            if bad.any():
                sp = self.coords[self.points]
                for r in np.flatnonzero(bad):
                    dd = np.linalg.norm(sp - pts[r], axis=1)
                    o = np.lexsort((self.points, dd))[:kk]
                    dist[r], pos[r] = dd[o], o
        return pos[:, :k], dist[:, :k]


def nearest_sample_points(plan: SampleBatchPlan, x, k):
    """The k sample points nearest to x as (node index, batch id) pairs."""
    pos, _ = plan.nearest(np.asarray(x, dtype=float)[None, :], k)
    return [(int(plan.points[p]), int(plan.batch_ids[p])) for p in pos[0]]


def plan_batches(m: ImpulseMoments, tau=DEFAULT_TAU, n_b=1, seed=0) -> SampleBatchPlan:
    """Greedy packing: per batch, visit candidates farthest-first and keep disjoint ellipsoids.

    The first batch visits candidates in a seeded random order. Later batches
    visit them by decreasing distance to the nearest point of all previous
    batches. Candidates are all valid nodes not already in a batch.
    """
    valid = np.flatnonzero(m.valid)
    if len(valid) == 0:
        raise NoValidNodesError("no valid nodes to choose sample points from")
    coords = m.grid.coords
    rng = np.random.default_rng(seed)
    shape = tau ** 2 * np.asarray(m.Sigma)
    half = tau * np.sqrt(np.stack([m.Sigma[:, 0, 0], m.Sigma[:, 1, 1]], -1).clip(min=0))
    lo_all, hi_all = m.mu - half, m.mu + half

    used = np.zeros(m.grid.n_nodes, dtype=bool)
    batches = []
    for k in range(n_b):
        cand = valid[~used[valid]]
        if k == 0:
            order = rng.permutation(cand)
        else:
            chosen = np.flatnonzero(used)
            if len(chosen) == 0:
                order = cand
            else:
                dist, _ = cKDTree(coords[chosen]).query(coords[cand])
                order = cand[np.argsort(-dist, kind="stable")]
        batch = []
        for c in order:
            if batch:
                b = np.asarray(batch)
                boxes = np.all((lo_all[b] <= hi_all[c]) & (lo_all[c] <= hi_all[b]), axis=1)
                if boxes.any():
                    hit = b[boxes]
                    if any_intersect(m.mu[hit] - m.mu[c], shape[c][None], shape[hit]):
                        continue
            batch.append(int(c))
        used[batch] = True
        batches.append(batch)
    return SampleBatchPlan(coords, batches, float(tau), int(seed))
