"""Dirac combs and impulse response batches."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .grid import GridFunction
from .moments import ImpulseMoments, inv2x2
from .packing import SampleBatchPlan


def dirac_comb(plan: SampleBatchPlan, moments: ImpulseMoments, k: int) -> np.ndarray:
    """Dual vector of sum_i delta_{x_i} / V(x_i) over batch k.

    With a Kronecker basis the point source at node i has dual coefficients e_i.
    """
    batch = plan.batches[k]
    if not batch:
        raise ValueError(f"batch {k} is empty")
    xi = np.zeros(moments.grid.n_nodes)
    idx = np.asarray(batch)
    xi[idx] = 1.0 / moments.V[idx]
    return xi


@dataclass
class ImpulseBatchSet:
    plan: SampleBatchPlan
    moments: ImpulseMoments
    etas: np.ndarray = field(repr=False)  # (n_batches, N) Riesz representatives

    def __post_init__(self):
        if len(self.etas) != self.plan.n_batches:
            raise ValueError("need one eta per batch")

    @property
    def grid(self):
        return self.moments.grid

    @property
    def tau(self):
        return self.plan.tau

    def eta(self, k) -> GridFunction:
        return GridFunction(self.grid, self.etas[k])

    def truncate(self, n_batches):
        return ImpulseBatchSet(self.plan.truncate(n_batches), self.moments, self.etas[:n_batches])

    def to_csv(self, path):
        """Node coordinates plus one column per batch function."""
        xy = self.grid.coords
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["x", "y"] + [f"eta_{k}" for k in range(len(self.etas))])
            for i in range(len(xy)):
                wr.writerow([repr(xy[i, 0]), repr(xy[i, 1])] + [repr(float(e[i])) for e in self.etas])


def harvest_batches(op, plan: SampleBatchPlan, moments: ImpulseMoments) -> ImpulseBatchSet:
    """Apply the operator once per non-empty batch comb; empty batches give eta = 0."""
    w = op.mass.weights
    etas = np.zeros((plan.n_batches, op.N))
    for k, batch in enumerate(plan.batches):
        if not batch:
            continue
        comb = dirac_comb(plan, moments, k)
        etas[k] = op.apply(comb / w) / w
    return ImpulseBatchSet(plan, moments, etas)


def eval_impulse(batches: ImpulseBatchSet, sample, z) -> float:
    """phi_{x_i}(z) recovered from its batch: eta_b(z) V(x_i) inside E_{x_i}, else 0."""
    node, b = sample
    z = np.asarray(z, dtype=float)
    if not batches.grid.contains(z[None, :])[0]:
        raise ValueError(f"point {tuple(z)} is outside the domain")
    m = batches.moments
    d = z - m.mu[node]
    if d @ inv2x2(m.Sigma[node]) @ d > batches.tau ** 2:
        return 0.0
    return float(batches.grid.interpolate(batches.etas[b], z[None, :])[0] * m.V[node])
