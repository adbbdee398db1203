from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid


class NumericalFailure(RuntimeError):
    """Raised when a computation breaks down (singular systems, divergence, ...)"""


class ConfigError(ValueError):
    """Raised for malformed or unknown experiment configuration"""


DOMAIN_KINDS = ("interval", "unit_disk", "periodic_cell")


@dataclass(frozen=True)
class DomainSpec:
    kind: str  # "interval", "unit_disk" or "periodic_cell"
    dim: int = 1
    lo: float = 0.0
    hi: float = 1.0
    length: float = 1.0  # periodic cell side

    def __post_init__(self):
        if self.kind not in DOMAIN_KINDS:
            raise ValueError(f"Unknown domain kind '{self.kind}'")
        if self.dim < 1:
            raise ValueError(f"Domain dimension must be >= 1, got {self.dim}")
        if self.kind == "interval" and not self.lo < self.hi:
            raise ValueError(f"Interval needs lo < hi, got [{self.lo}, {self.hi}]")
        if self.kind == "unit_disk" and self.dim != 2:
            raise ValueError("unit_disk is two-dimensional")
        if self.kind == "periodic_cell" and self.length <= 0:
            raise ValueError(f"Periodic cell length must be positive, got {self.length}")

    @classmethod
    def interval(cls, lo: float = 0.0, hi: float = 1.0) -> "DomainSpec":
        return cls("interval", 1, float(lo), float(hi))

    @classmethod
    def unit_disk(cls) -> "DomainSpec":
        return cls("unit_disk", 2, -1.0, 1.0)

    @classmethod
    def periodic_cell(cls, length: float = 1.0, dim: int = 1) -> "DomainSpec":
        return cls("periodic_cell", dim, 0.0, float(length), float(length))

    @property
    def bounds(self) -> Tuple[float, float]:
        if self.kind == "periodic_cell":
            return 0.0, self.length
        return self.lo, self.hi

    @property
    def diameter(self) -> float:
        if self.kind == "unit_disk":
            return 2.0
        lo, hi = self.bounds
        return (hi - lo) * float(np.sqrt(self.dim))

    def contains(self, points: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        """Boolean mask of rows of ``points`` (N x dim) lying in the closed domain"""
        pts = np.asarray(points, dtype=float).reshape(len(points), -1)
        if self.kind == "unit_disk":
            return np.sum(pts ** 2, axis=1) <= 1.0 + tol
        lo, hi = self.bounds
        return np.all((pts >= lo - tol) & (pts <= hi + tol), axis=1)


@dataclass
class EllipticCoeffs1D:
    a: Callable  # diffusion, positive
    b: Callable  # drift
    c: Callable  # potential, nonnegative
    g: Callable  # forcing, nonnegative
    h0: float
    h1: float
    lo: float = 0.0
    hi: float = 1.0


@dataclass
class ParabolicCoeffs1D:
    elliptic: EllipticCoeffs1D
    rho_init: Callable
    t_end: float
    time_steps: int = 100


@dataclass
class TorusCoeffs1D:
    b: Callable
    kappa: Callable
    kappa_minus: float
    kappa_plus: float
    length: float = 1.0


@dataclass
class TabulatedDensity:
    domain: DomainSpec
    grid: object  # 1D node array, or (r, theta) tuple for the disk
    values: np.ndarray
    norm_constant: float
    cdf: Optional[np.ndarray] = None
    measure_id: str = "density"
    evaluator: Optional[Callable] = None  # closed-form pdf, when known
    cdf_evaluator: Optional[Callable] = None
    quantile_evaluator: Optional[Callable] = None
    envelope: Optional[float] = None  # upper bound on the pdf (rejection sampling)

    @property
    def dim(self) -> int:
        return self.domain.dim

    def total_mass(self) -> float:
        """Trapezoid integral of the tabulated values on their own grid"""
        if self.domain.kind == "unit_disk":
            r, theta = self.grid
            dtheta = 2.0 * np.pi / len(theta)
            radial = trapezoid(self.values * r[:, None], r, axis=0)
            return float(np.sum(radial) * dtheta)
        return float(trapezoid(self.values, self.grid))

    def pdf(self, points) -> np.ndarray:
        if self.evaluator is not None:
            return np.asarray(self.evaluator(np.asarray(points, dtype=float)), dtype=float)
        if self.domain.kind == "unit_disk":
            raise ValueError(f"Density '{self.measure_id}' has no pointwise evaluator")
        x = np.asarray(points, dtype=float).reshape(-1)
        return np.interp(x, self.grid, self.values, left=0.0, right=0.0)

    def cdf_at(self, x) -> np.ndarray:
        if self.cdf is None:
            raise ValueError(f"Density '{self.measure_id}' has no cumulative distribution")
        if self.cdf_evaluator is not None:
            return np.asarray(self.cdf_evaluator(np.asarray(x, dtype=float)), dtype=float)
        return np.interp(x, self.grid, self.cdf, left=0.0, right=1.0)

    def quantile(self, u) -> np.ndarray:
        if self.cdf is None:
            raise ValueError(f"Density '{self.measure_id}' has no cumulative distribution")
        if self.quantile_evaluator is not None:
            return np.asarray(self.quantile_evaluator(np.asarray(u, dtype=float)), dtype=float)
        return np.interp(u, self.cdf, self.grid)


@dataclass(frozen=True)
class PointMass:
    location: Tuple[float, ...]
    measure_id: str = "point_mass"

    @property
    def dim(self) -> int:
        return len(self.location)

    def quantile(self, u) -> np.ndarray:
        return np.full(np.shape(u), self.location[0], dtype=float)


@dataclass
class SampleSet:
    points: np.ndarray  # N x d
    measure_id: str
    seed: int
    domain: Optional[DomainSpec] = None
    info: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError(f"SampleSet '{self.measure_id}' needs an N x d array with N >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"SampleSet '{self.measure_id}' contains non-finite points")
        if self.domain is not None and not np.all(self.domain.contains(pts)):
            raise ValueError(f"SampleSet '{self.measure_id}' has points outside its {self.domain.kind}")
        self.points = pts

    @property
    def N(self) -> int:
        return int(self.points.shape[0])

    @property
    def dim(self) -> int:
        return int(self.points.shape[1])


ASSIGNMENT_METHODS = ("sorted_1d", "exact_lp", "minibatch_refine", "brute_force")


@dataclass
class Assignment:
    sigma: np.ndarray
    total_sq_cost: float
    method: str
    cost_history: Tuple[float, ...] = ()

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=np.int64)
        n = sigma.size
        if not np.array_equal(np.sort(sigma), np.arange(n)):
            raise ValueError("Assignment sigma is not a permutation")
        if self.method not in ASSIGNMENT_METHODS:
            raise ValueError(f"Unknown assignment method '{self.method}'")
        if self.total_sq_cost < 0:
            raise ValueError("Assignment cost must be nonnegative")
        self.sigma = sigma

    @property
    def N(self) -> int:
        return int(self.sigma.size)


@dataclass
class W2Result:
    value: float
    assignment: Optional[Assignment]  # None for subsample averages
    exact: bool
    method: str = "exact_lp"


@dataclass
class TransportNet:
    layer_dims: Tuple[int, ...]
    weights: List[np.ndarray]  # weights[l] has shape (out, in)
    biases: List[np.ndarray]
    seed: Optional[int] = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2:
            raise ValueError("TransportNet needs at least input and output layers")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("TransportNet parameter lists do not match layer_dims")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_dims[l + 1], self.layer_dims[l])
            if w.shape != expected or b.shape != (expected[0],):
                raise ValueError(f"Layer {l} has shapes {w.shape}/{b.shape}, expected {expected}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"Layer {l} has non-finite parameters")

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "TransportNet":
        return TransportNet(self.layer_dims, [w.copy() for w in self.weights],
                            [b.copy() for b in self.biases], self.seed)


@dataclass
class OptimState:
    m_weights: List[np.ndarray]
    v_weights: List[np.ndarray]
    m_biases: List[np.ndarray]
    v_biases: List[np.ndarray]
    base_lr: float = 1e-2
    step_size: int = 500
    gamma: float = 0.9
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @property
    def learning_rate(self) -> float:
        """StepLR schedule: base * gamma ** floor(step / step_size)"""
        return self.base_lr * self.gamma ** (self.step // self.step_size)


@dataclass(frozen=True)
class ApproxBudget:
    width: int  # W
    depth: int  # L
    alpha: float
    lambda_h: float
    box_half_width: float
    dim: int
    bound: float
    prescribed_width: int
    prescribed_depth: int


@dataclass
class TrainConfig:
    max_iters: int = 100_000
    batch_size: int = 0  # 0 means floor(N / 2)
    lr: float = 1e-2
    step_size: int = 500
    gamma: float = 0.9
    patience: int = 5000
    assignment_refresh_every: int = 1
    global_assignment: bool = False
    divergence_threshold: float = 1e6
    seed: int = 0

    def resolve_batch(self, n: int) -> int:
        batch = self.batch_size if self.batch_size > 0 else max(1, n // 2)
        if not 1 <= batch <= n:
            raise ValueError(f"Batch size {batch} outside [1, {n}]")
        return batch

    def validate(self, n: int) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 1 <= self.patience <= self.max_iters:
            raise ValueError(f"patience {self.patience} must lie in [1, max_iters={self.max_iters}]")
        if self.assignment_refresh_every < 1:
            raise ValueError("assignment_refresh_every must be >= 1")
        if self.lr < 0 or self.step_size < 1 or not 0 < self.gamma <= 1:
            raise ValueError("Invalid learning-rate schedule")
        self.resolve_batch(n)


@dataclass
class TrainHistory:
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    is_best: List[bool] = field(default_factory=list)
    best_loss: float = float("inf")
    best_iter: int = -1
    best_net: Optional[TransportNet] = None
    best_batch: Optional[np.ndarray] = None
    phase_seconds: Dict[str, float] = field(default_factory=dict)
    stopped_reason: str = ""
    diverged: bool = False


@dataclass(frozen=True)
class StatEstimate:
    mean: float
    stderr: float
    approximate: bool = False


@dataclass
class RiskReport:
    n: int
    empirical_risk: float
    population_risk_estimate: float
    population_risk_stderr: float
    eps_gen: float
    eps_opt: Optional[float]
    eps_app: Optional[float]
    eps_disc: Optional[float]
    eps_app_l2: Optional[float] = None
    stat_term: Optional[float] = None
    generalization_bound: Optional[float] = None
    lipschitz_bound: Optional[float] = None
    approx_budget: Optional[ApproxBudget] = None
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def excess_risk(self) -> float:
        """Measured excess risk; R(T; mu, nu) = 0 because T pushes mu onto nu"""
        return self.population_risk_estimate

    def term_sum(self) -> Optional[float]:
        terms = (self.eps_gen, self.eps_opt, self.eps_app, self.eps_disc)
        if any(t is None for t in terms):
            return None
        return float(sum(terms))


@dataclass
class RateFit:
    slope: float
    intercept: float
    n_list: List[int]
    means: List[float]
    stderrs: List[float]
    repeats: int
    residuals: List[float] = field(default_factory=list)
    predicted_slope: Optional[float] = None
    excluded_runs: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.n_list, self.n_list[1:])):
            raise ValueError("RateFit N list must be strictly increasing")


@dataclass
class DoublingProbeResult:
    max_ratio: float
    trials: int
    worst_center: np.ndarray
    worst_matrix: np.ndarray  # E = {x : (x - c)^T M^{-1} (x - c) <= 1}
    ratios: np.ndarray


@dataclass
class HolderEstimate:
    beta: float
    constant: float
    pairs: int
    r_max: float
    beta_stderr: float = 0.0
    beta_lower: float = 0.0
    raw_slope: float = 0.0


@dataclass
class OODResult:
    lhs: float
    rhs: float
    slack: float
    tolerance: float
    w2_shift: float


@dataclass(frozen=True)
class SweepRow:
    """One (N, repeat) training run of a rate sweep"""
    N: int
    repeat: int
    val_w2: float
    train_loss: float
    best_iter: int
    iterations: int
    diverged: bool
    seed: int
