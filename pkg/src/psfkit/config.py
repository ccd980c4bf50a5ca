"""Experiment configuration: nested dataclasses with JSON round-trip and validation."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}")
        self.path = path


@dataclass
class GridSpec:
    nx: int = 33
    ny: int = 33
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0


@dataclass
class BlurSpec:
    L: float = 1.0
    a: float = 0.0
    c1: float = 0.0036
    c2: float = 0.0144


@dataclass
class AdvDiffSpec:
    kappa: float = 3.2e-4
    T: float = 0.5
    n_steps: int = 40
    omega: float = 0.25
    gamma: float = 1e-4
    delta: float = 1e-4
    noise: Optional[float] = None  # noise precision; None -> 5% of max observation


@dataclass
class PsfSpec:
    tau: float = 3.0
    n_b: int = 5
    k_n: int = 10
    c_rbf: float = 0.5
    eps_V: float = 1e-5
    eps_Sigma: float = 1.0 / 20.0


@dataclass
class HmatrixSpec:
    n_leaf: int = 64
    eps_aca: float = 1e-5
    k_h_max: int = 50


@dataclass
class SpdfixSpec:
    eps_flip: float = -0.1


@dataclass
class SolverSpec:
    tol: float = 1e-6
    max_iter: int = 5000
    seed: int = 0


@dataclass
class SweepSpec:
    taus: list = field(default_factory=lambda: [2.5, 3.0, 4.0])
    n_b_list: list = field(default_factory=lambda: list(range(1, 11)))
    L_list: list = field(default_factory=lambda: [1.0, 0.5, 1.0 / 3.0])
    tolerances: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    a_list: list = field(default_factory=lambda: [0.0, 1.0, 2.0, 5.0, 20.0, 27.0])
    precond_n_b: list = field(default_factory=lambda: [1, 5, 10])
    psf_max_batches: int = 25
    glr_max_rank: int = 600


@dataclass
class ExperimentConfig:
    operator: str = "blur"
    grid: GridSpec = field(default_factory=GridSpec)
    blur: BlurSpec = field(default_factory=BlurSpec)
    advdiff: AdvDiffSpec = field(default_factory=AdvDiffSpec)
    psf: PsfSpec = field(default_factory=PsfSpec)
    hmatrix: HmatrixSpec = field(default_factory=HmatrixSpec)
    spdfix: SpdfixSpec = field(default_factory=SpdfixSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    output: str = "out"

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    def config_hash(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        cfg = _build(cls, d, "")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("<root>", f"invalid JSON: {exc}") from exc
        return cls.from_dict(d)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def validate(self):
        def need(cond, path, msg):
            if not cond:
                raise ConfigError(path, msg)

        need(self.operator in ("blur", "advdiff"), "operator", "must be 'blur' or 'advdiff'")
        g = self.grid
        need(g.nx >= 2, "grid.nx", "must be >= 2")
        need(g.ny >= 2, "grid.ny", "must be >= 2")
        need(g.x_min < g.x_max, "grid.x_max", "must exceed x_min")
        need(g.y_min < g.y_max, "grid.y_max", "must exceed y_min")
        need(self.blur.L > 0, "blur.L", "must be positive")
        need(self.blur.c1 > 0, "blur.c1", "must be positive")
        need(self.blur.c2 > 0, "blur.c2", "must be positive")
        a = self.advdiff
        need(a.kappa > 0, "advdiff.kappa", "must be positive")
        need(a.T > 0, "advdiff.T", "must be positive")
        need(a.n_steps >= 1, "advdiff.n_steps", "must be >= 1")
        need(a.gamma > 0, "advdiff.gamma", "must be positive")
        need(a.delta > 0, "advdiff.delta", "must be positive")
        need(a.noise is None or a.noise > 0, "advdiff.noise", "must be positive or null")
        p = self.psf
        need(p.tau > 0, "psf.tau", "must be positive")
        need(p.n_b >= 0, "psf.n_b", "must be >= 0")
        need(p.k_n >= 1, "psf.k_n", "must be >= 1")
        need(p.c_rbf > 0, "psf.c_rbf", "must be positive")
        need(0 < p.eps_V < 1, "psf.eps_V", "must lie in (0, 1)")
        need(0 < p.eps_Sigma <= 1, "psf.eps_Sigma", "must lie in (0, 1]")
        h = self.hmatrix
        need(h.n_leaf >= 1, "hmatrix.n_leaf", "must be >= 1")
        need(h.eps_aca > 0, "hmatrix.eps_aca", "must be positive")
        need(h.k_h_max >= 1, "hmatrix.k_h_max", "must be >= 1")
        need(-1 < self.spdfix.eps_flip <= 0, "spdfix.eps_flip", "must lie in (-1, 0]")
        s = self.solver
        need(s.tol > 0, "solver.tol", "must be positive")
        need(s.max_iter >= 1, "solver.max_iter", "must be >= 1")
        w = self.sweep
        need(all(t > 0 for t in w.taus), "sweep.taus", "must be positive")
        need(all(int(n) == n and n >= 0 for n in w.n_b_list), "sweep.n_b_list", "must be non-negative integers")
        need(all(v > 0 for v in w.L_list), "sweep.L_list", "must be positive")
        need(all(0 < t < 1 for t in w.tolerances), "sweep.tolerances", "must lie in (0, 1)")
        need(all(int(n) == n and n >= 1 for n in w.precond_n_b), "sweep.precond_n_b", "must be positive integers")
        need(w.psf_max_batches >= 1, "sweep.psf_max_batches", "must be >= 1")
        need(w.glr_max_rank >= 1, "sweep.glr_max_rank", "must be >= 1")


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(prefix or "<root>", "expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in d.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            raise ConfigError(path, "unknown field")
        f = fields[key]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, val, path)
            continue
        kwargs[key] = _coerce(f, val, path)
    return cls(**kwargs)


def _coerce(f, val, path):
    default = f.default if f.default is not dataclasses.MISSING else (
        f.default_factory() if f.default_factory is not dataclasses.MISSING else None)
    if val is None:
        if default is None:
            return None
        raise ConfigError(path, "must not be null")
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise ConfigError(path, "expected a boolean")
        return val
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(val, bool) or not isinstance(val, (int, float)) or int(val) != val:
            raise ConfigError(path, "expected an integer")
        return int(val)
    if isinstance(default, float) or (default is None and f.type in ("Optional[float]", Optional[float])):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(val)
    if isinstance(default, str):
        if not isinstance(val, str):
            raise ConfigError(path, "expected a string")
        return val
    if isinstance(default, list):
        if not isinstance(val, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in val):
            raise ConfigError(path, "expected a list of numbers")
        return list(val)
    return val


def advdiff_defaults() -> ExperimentConfig:
    """Configuration for Hessian preconditioning studies (c_rbf = 3.0)."""
    cfg = ExperimentConfig(operator="advdiff")
    cfg.psf.c_rbf = 3.0
    return cfg
