"""Excess-risk terms, statistical rates, doubling and Holder probes, and the target-shift bound."""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from measures import density_for_example, sample, source_for_example
from models import (
    ApproxBudget,
    DomainSpec,
    DoublingProbeResult,
    HolderEstimate,
    NumericalFailure,
    OODResult,
    PointMass,
    RateFit,
    RiskReport,
    SampleSet,
    StatEstimate,
    SweepRow,
    TabulatedDensity,
    TrainConfig,
    TransportNet,
)
from neural_map import approx_budget, as_callable, init_net, lipschitz_upper_bound
from seed_manager import derive_seed, make_rng
from trainer import push_forward, train, validate
from transport import TransportMethod, assignment_exact, w2_1d, w2_point_clouds

logger = logging.getLogger(__name__)

Measure = Union[TabulatedDensity, PointMass]

REFERENCE_FACTOR = 10
STAT_EXACT_MAX = 2048
QUADRATURE_FLOOR = 1e-14
BOUNDARY_GAP = 1e-9
MAX_CONDITION = 100.0
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _w2(xs: SampleSet, ys: SampleSet, method: Optional[TransportMethod] = None) -> float:
    if xs.dim == 1 and (method is None or method.name == "exact_lp"):
        return w2_1d(xs, ys).value
    return w2_point_clouds(xs, ys, method).value


def _mean_stderr(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size < 2:
        return float(arr.mean()), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(arr.size))


# ---------------------------------------------------------------------------
# Statistical terms
# ---------------------------------------------------------------------------

def stat_term_mc(measure: Measure, N: int, repeats: int, seed: int) -> StatEstimate:
    """Monte Carlo mean of W2(nu, nu_N) and its standard error.

    In 1D every sample is coupled exactly to 10N quantile atoms of the measure.
    On the disk the sample, replicated 10 times, is coupled exactly to an
    independent 10N reference cloud; above STAT_EXACT_MAX reference points the
    value falls back to a subsample average. Disk estimates are flagged approximate.
    """
    if repeats < 2:
        raise ValueError(f"repeats must be >= 2, got {repeats}")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")

    one_dim = measure.dim == 1
    if one_dim:
        m = REFERENCE_FACTOR * N
        atoms = np.asarray(measure.quantile((np.arange(m) + 0.5) / m), dtype=float)

    values = []
    for r in range(repeats):
        draw = sample(measure, N, derive_seed(seed, "stat", measure.measure_id, N, r))
        if one_dim:
            replicated = np.repeat(np.sort(draw.points[:, 0]), REFERENCE_FACTOR)
            values.append(math.sqrt(float(np.mean((replicated - atoms) ** 2))))
        else:
            ref = sample(measure, REFERENCE_FACTOR * N, derive_seed(seed, "stat-ref", measure.measure_id, N, r))
            if ref.N <= STAT_EXACT_MAX:
                replicated = SampleSet(np.repeat(draw.points, REFERENCE_FACTOR, axis=0),
                                       draw.measure_id, draw.seed)
                values.append(w2_point_clouds(replicated, ref).value)
            else:
                method = TransportMethod("subsample_avg", k=REFERENCE_FACTOR, m=N,
                                         seed=derive_seed(seed, "stat-sub", N, r))
                values.append(w2_point_clouds(draw, ref, method).value)

    mean, stderr = _mean_stderr(values)
    logger.debug("stat_term_mc(%s, N=%d): %.6g +/- %.2g", measure.measure_id, N, mean, stderr)
    return StatEstimate(mean, stderr, approximate=not one_dim)


def j2_functional(density: TabulatedDensity) -> float:
    """Trapezoid quadrature of F(1 - F) / f over the density's grid"""
    if density.dim != 1 or density.cdf is None:
        raise ValueError(f"'{density.measure_id}' is not a tabulated 1D density")
    x = np.asarray(density.grid, dtype=float)
    f = np.asarray(density.values, dtype=float)
    F = np.asarray(density.cdf, dtype=float)
    if np.any(f[1:-1] <= 0):
        raise ValueError(f"'{density.measure_id}' vanishes inside its domain; J2 is infinite")

    g = np.zeros_like(f)
    inner = slice(1, -1)
    g[inner] = F[inner] * (1.0 - F[inner]) / f[inner]
    # f may vanish at an endpoint where F(1-F) does too; extrapolate the limit
    g[0] = 0.0 if f[0] > 0 else 2.0 * g[1] - g[2]
    g[-1] = 0.0 if f[-1] > 0 else 2.0 * g[-2] - g[-3]
    return float(trapezoid(g, x))


def j2_bound(density: TabulatedDensity, N: int) -> float:
    """Upper bound sqrt(2 J2 / (N + 1)) on E W2(lambda, lambda_N) in one dimension"""
    return math.sqrt(2.0 * j2_functional(density) / (N + 1))


def disc_bound(density: TabulatedDensity, N: int) -> float:
    return 2.0 * j2_bound(density, N)


def stat_bound(lipschitz: float, mean_w2_mu: float, mean_w2_nu: float) -> float:
    return lipschitz * mean_w2_mu + 3.0 * mean_w2_nu


def generalization_bound(lipschitz: float, w2_mu: float, w2_nu: float) -> float:
    return lipschitz * w2_mu + w2_nu


def predicted_rate(d: int) -> float:
    """Guaranteed log-log slope of E W2 in N for a fixed architecture.

    d = 4 carries an extra sqrt(log(1 + N)) factor that the slope does not show.
    """
    if d < 1:
        raise ValueError(f"Dimension must be >= 1, got {d}")
    return -0.25 if d <= 4 else -1.0 / d


def example_rate(example: str) -> float:
    """Predicted slope for a bundled example.

    The 1D example has a finite J2 functional, so E W2 decays like N^(-1/2);
    other examples fall back to the fixed-architecture guarantee.
    """
    if example == "1d":
        return -0.5
    if example == "2d":
        return predicted_rate(2)
    raise ValueError(f"Unknown example '{example}'")


def w2_to_point(density: TabulatedDensity, location: float) -> float:
    """Population W2 between a 1D density and a point mass"""
    if density.dim != 1:
        raise ValueError("w2_to_point expects a 1D density")
    x = np.asarray(density.grid, dtype=float)
    return math.sqrt(float(trapezoid((x - location) ** 2 * density.values, x)))


# ---------------------------------------------------------------------------
# Excess-risk decomposition
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    """Everything a trained run leaves behind for the risk decomposition"""
    xs: SampleSet
    ys: SampleSet
    model: object  # TransportNet or batch callable
    source: Measure
    target: Measure
    oracle: Optional[Callable] = None  # exact transport map, when known
    lipschitz: Optional[float] = None  # overrides the network bound
    holder: Optional[Tuple[float, float, float]] = None  # (alpha, lambda_H, B)
    method: Optional[TransportMethod] = None  # population-scale transport


def _source_grid(domain: DomainSpec, n: int = 1001) -> np.ndarray:
    if domain.kind == "unit_disk":
        side = int(math.sqrt(n)) | 1
        axis = np.linspace(-1.0, 1.0, side)
        pts = np.stack(np.meshgrid(axis, axis), axis=-1).reshape(-1, 2)
        return pts[np.sum(pts ** 2, axis=1) <= 1.0]
    lo, hi = domain.bounds
    return np.linspace(lo, hi, n)[:, None]


def _net_budget(net: TransportNet, holder: Tuple[float, float, float]) -> ApproxBudget:
    hidden = net.layer_dims[1:-1] or (1,)
    alpha, lambda_h, box = holder
    return approx_budget(max(hidden), max(1, len(net.layer_dims) - 2), alpha, lambda_h, box, net.d_in)


def decompose_excess_risk(artifacts: RunArtifacts, val_size: int, seed: int,
                          pop_blocks: int = 5, stat_repeats: int = 10,
                          validation: Optional[Tuple[SampleSet, SampleSet]] = None) -> RiskReport:
    """Split the measured excess risk into generalization, optimization, approximation and discretization terms.

    The population risk is the mean validation W2 over `pop_blocks` fresh
    validation pairs, or the W2 on `validation` when supplied. Without an
    oracle only the generalization term is available.
    """
    xs, ys = artifacts.xs, artifacts.ys
    model = artifacts.model
    n = xs.N

    empirical = _w2(push_forward(model, xs), ys)
    if validation is not None:
        population, pop_se = _w2(push_forward(model, validation[0]), validation[1], artifacts.method), 0.0
    else:
        if pop_blocks < 1 or val_size < 1:
            raise ValueError("Population estimate needs pop_blocks >= 1 and val_size >= 1")
        block_values = []
        for b in range(pop_blocks):
            vx = sample(artifacts.source, val_size, derive_seed(seed, "pop-x", n, b))
            vy = sample(artifacts.target, val_size, derive_seed(seed, "pop-y", n, b))
            block_values.append(validate(model, vx, vy, artifacts.method).value)
        population, pop_se = _mean_stderr(block_values)

    notes = {
        "population_risk": (f"mean of {pop_blocks} validation blocks of size {val_size}"
                            if validation is None else "supplied validation pair"),
        "eps_gen": "estimate: population minus empirical risk",
    }
    eps_gen = population - empirical
    eps_opt = eps_app = eps_disc = eps_app_l2 = None

    if artifacts.oracle is not None:
        eps_disc = _w2(push_forward(artifacts.oracle, xs), ys)
        grid = _source_grid(xs.domain or getattr(artifacts.source, "domain", DomainSpec.interval()))
        learned = np.asarray(as_callable(model)(grid), dtype=float).reshape(len(grid), -1)
        exact = np.asarray(artifacts.oracle(grid), dtype=float).reshape(len(grid), -1)
        eps_app = float(np.max(np.linalg.norm(learned - exact, axis=1)))
        on_train = (np.asarray(as_callable(model)(xs.points), dtype=float).reshape(n, -1)
                    - np.asarray(artifacts.oracle(xs.points), dtype=float).reshape(n, -1))
        eps_app_l2 = math.sqrt(float(np.mean(np.sum(on_train ** 2, axis=1))))
        eps_opt = empirical - eps_app - eps_disc
        notes.update({
            "eps_opt": "residual of the telescoping identity; integrability over samples is not checked",
            "eps_app": "upper bound: sup-norm distance to the exact map on a source grid",
            "eps_disc": "empirical W2 of the exact map on the training samples",
        })
    else:
        notes["eps_app"] = notes["eps_disc"] = notes["eps_opt"] = "unavailable without an exact map"

    lipschitz = artifacts.lipschitz
    if lipschitz is None and isinstance(model, TransportNet):
        lipschitz = lipschitz_upper_bound(model)

    stat_term = gen_bound = None
    if lipschitz is not None and stat_repeats >= 2:
        mu_stat = stat_term_mc(artifacts.source, n, stat_repeats, derive_seed(seed, "stat-mu"))
        nu_stat = stat_term_mc(artifacts.target, n, stat_repeats, derive_seed(seed, "stat-nu"))
        stat_term = stat_bound(lipschitz, mu_stat.mean, nu_stat.mean)
        gen_bound = generalization_bound(lipschitz, mu_stat.mean, nu_stat.mean)
        notes["generalization_bound"] = "expected form from Monte Carlo means of W2(mu, mu_N) and W2(nu, nu_N)"

    budget = None
    if artifacts.holder is not None and isinstance(model, TransportNet):
        budget = _net_budget(model, artifacts.holder)
        notes["approx_budget"] = "constant 19 sqrt(d) lambda (2B)^alpha taken as the approximation constant"

    return RiskReport(n, empirical, population, pop_se, eps_gen, eps_opt, eps_app, eps_disc,
                      eps_app_l2, stat_term, gen_bound, lipschitz, budget, notes)


# ---------------------------------------------------------------------------
# Rate sweeps
# ---------------------------------------------------------------------------

def fit_rate(n_list: Sequence[int], means: Sequence[float], stderrs: Sequence[float],
             repeats: int, predicted_slope: Optional[float] = None, excluded_runs: int = 0) -> RateFit:
    """Ordinary least squares of log10(mean W2) against log10(N)"""
    if len(n_list) < 2 or len(n_list) != len(means):
        raise ValueError("fit_rate needs at least two (N, mean) pairs of equal length")
    if np.any(np.asarray(means) <= 0):
        raise ValueError("Mean W2 values must be positive for a log-log fit")
    log_n = np.log10(np.asarray(n_list, dtype=float))
    log_w = np.log10(np.asarray(means, dtype=float))
    slope, intercept = np.polyfit(log_n, log_w, 1)
    residuals = log_w - (slope * log_n + intercept)
    return RateFit(float(slope), float(intercept), [int(v) for v in n_list], [float(v) for v in means],
                   [float(v) for v in stderrs], repeats, [float(v) for v in residuals],
                   predicted_slope, excluded_runs)


@dataclass(frozen=True)
class SweepTask:
    example: str
    N: int
    repeat: int
    master_seed: int
    val_size: int
    train_cfg: TrainConfig
    method: Optional[TransportMethod]
    hidden: Tuple[int, ...]


def _run_one(task: SweepTask) -> SweepRow:
    source = source_for_example(task.example)
    target = density_for_example(task.example)
    run_seed = derive_seed(task.master_seed, "sweep", task.example, task.N, task.repeat)

    xs = sample(source, task.N, derive_seed(run_seed, "xs"))
    ys = sample(target, task.N, derive_seed(run_seed, "ys"))
    d = xs.dim
    net = init_net((d, *task.hidden, d), derive_seed(run_seed, "net"))
    cfg = replace(task.train_cfg, seed=derive_seed(run_seed, "train"))
    try:
        net, history = train(xs, ys, net, cfg)
    except NumericalFailure as exc:
        logger.warning("Run N=%d repeat=%d failed: %s", task.N, task.repeat, exc)
        return SweepRow(task.N, task.repeat, float("nan"), float("nan"), -1, 0, True, run_seed)

    val_xs = sample(source, task.val_size, derive_seed(run_seed, "val-xs"))
    val_ys = sample(target, task.val_size, derive_seed(run_seed, "val-ys"))
    val_w2 = validate(net, val_xs, val_ys, task.method).value
    return SweepRow(task.N, task.repeat, val_w2, history.best_loss, history.best_iter,
                    len(history.losses), history.diverged, run_seed)


def sweep_runs(example: str, n_list: Sequence[int], repeats: int, train_cfg: TrainConfig, seed: int,
               val_size: int, method: Optional[TransportMethod] = None,
               hidden: Sequence[int] = (256, 256), workers: int = 1) -> List[SweepRow]:
    """Train and validate one fresh net per (N, repeat); rows come back in task order"""
    n_list = [int(v) for v in n_list]
    if len(n_list) < 3:
        raise ValueError(f"A rate sweep needs at least 3 sample sizes, got {len(n_list)}")
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("Sample sizes must be strictly increasing")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if example == "1d":
        method = None
    tasks = [SweepTask(example, N, r, seed, val_size, train_cfg, method, tuple(hidden))
             for N in n_list for r in range(repeats)]

    logger.info("Sweep %s: %d runs over N=%s on %d worker(s)", example, len(tasks), n_list, workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(task) for task in tasks]


def summarize_sweep(rows: Sequence[SweepRow], example: str) -> RateFit:
    """Per-N means over non-diverged runs and the log-log fit"""
    n_list = sorted({row.N for row in rows})
    means, stderrs = [], []
    excluded = sum(1 for row in rows if row.diverged)
    for N in n_list:
        vals = [row.val_w2 for row in rows if row.N == N and not row.diverged]
        if not vals:
            raise NumericalFailure(f"Every run at N={N} diverged")
        mean, se = _mean_stderr(vals)
        means.append(mean)
        stderrs.append(se)
    repeats = max(sum(1 for row in rows if row.N == N) for N in n_list)
    if excluded:
        logger.warning("Excluded %d diverged run(s) from the fit", excluded)
    return fit_rate(n_list, means, stderrs, repeats, example_rate(example), excluded)


def rate_sweep(example: str, n_list: Sequence[int], repeats: int, cfg: TrainConfig, seed: int,
               val_size: int = 100_000, method: Optional[TransportMethod] = None,
               hidden: Sequence[int] = (256, 256), workers: int = 1) -> RateFit:
    rows = sweep_runs(example, n_list, repeats, cfg, seed, val_size, method, hidden, workers)
    return summarize_sweep(rows, example)


# ---------------------------------------------------------------------------
# Doubling probe
# ---------------------------------------------------------------------------

def _probe_intervals(density: TabulatedDensity, trials: int, rng: np.random.Generator,
                     margin: float) -> DoublingProbeResult:
    lo, hi = density.domain.bounds
    span = hi - lo
    centers = lo + span * (margin + (1.0 - 2.0 * margin) * rng.random(trials))
    reach = np.minimum(centers - lo, hi - centers) - BOUNDARY_GAP
    radii = reach * rng.uniform(0.05, 1.0, trials)

    if np.ptp(density.values) == 0:
        # flat density: masses are proportional to lengths
        full, half = 2.0 * radii, radii
        half_mass = radii * density.pdf(centers)
    else:
        full = density.cdf_at(centers + radii) - density.cdf_at(centers - radii)
        half = density.cdf_at(centers + radii / 2) - density.cdf_at(centers - radii / 2)
        half_mass = half
    if np.min(half_mass) < QUADRATURE_FLOOR:
        raise NumericalFailure(f"Half-interval mass {np.min(half_mass):.3e} below the quadrature floor")
    ratios = full / half
    worst = int(np.argmax(ratios))
    return DoublingProbeResult(float(ratios[worst]), trials, np.array([centers[worst]]),
                               np.array([[radii[worst] ** 2]]), ratios)


def _ellipse_mass(pdf: Callable, center: np.ndarray, axes: np.ndarray,
                  nodes: Tuple[np.ndarray, np.ndarray, np.ndarray]) -> float:
    """Mass of {center + axes @ u : |u| <= 1}; Gauss-Legendre in radius, trapezoid in angle"""
    rho, w_rho, phi = nodes
    unit = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    pts = center + (rho[:, None, None] * unit[None, :, :]) @ axes.T
    vals = pdf(pts.reshape(-1, 2)).reshape(len(rho), len(phi))
    jac = abs(np.linalg.det(axes))
    return float(jac * (2.0 * np.pi / len(phi)) * np.sum(w_rho * rho * vals.sum(axis=1)))


def _probe_ellipses(density: TabulatedDensity, trials: int, rng: np.random.Generator,
                    margin: float) -> DoublingProbeResult:
    x_gl, w_gl = leggauss(32)
    nodes = (0.5 * (x_gl + 1.0), 0.5 * w_gl, np.arange(64) * (2.0 * np.pi / 64))

    ratios = np.empty(trials)
    worst = (-np.inf, None, None)
    for t in range(trials):
        radius = (1.0 - margin) * math.sqrt(rng.random())
        angle = 2.0 * math.pi * rng.random()
        center = radius * np.array([math.cos(angle), math.sin(angle)])

        cond = math.exp(rng.random() * math.log(MAX_CONDITION))
        tilt = math.pi * rng.random()
        rot = np.array([[math.cos(tilt), -math.sin(tilt)], [math.sin(tilt), math.cos(tilt)]])
        semi = np.array([1.0, 1.0 / math.sqrt(cond)])
        # |center| + largest semi-axis bounds every point of the ellipse
        scale = (1.0 - BOUNDARY_GAP - radius) * rng.uniform(0.05, 1.0)
        axes = rot @ np.diag(scale * semi)

        full = _ellipse_mass(density.pdf, center, axes, nodes)
        half = _ellipse_mass(density.pdf, center, 0.5 * axes, nodes)
        if half < QUADRATURE_FLOOR:
            raise NumericalFailure(f"Half-ellipse mass {half:.3e} below the quadrature floor")
        ratios[t] = full / half
        if ratios[t] > worst[0]:
            worst = (ratios[t], center, axes @ axes.T)

    return DoublingProbeResult(float(worst[0]), trials, worst[1], worst[2], ratios)


def doubling_probe(density: TabulatedDensity, trials: int, seed: int, margin: float = 0.01) -> DoublingProbeResult:
    """Largest observed eta(E) / eta(E/2) over random ellipsoids strictly inside the domain.

    Centers keep a relative distance `margin` from the boundary. Intervals use
    cdf differences; disk ellipses use tensor quadrature on the pdf.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    if not 0 <= margin < 0.5:
        raise ValueError(f"margin must lie in [0, 0.5), got {margin}")
    rng = make_rng(seed)
    if density.domain.kind == "unit_disk":
        result = _probe_ellipses(density, trials, rng, margin)
    elif density.dim == 1:
        result = _probe_intervals(density, trials, rng, margin)
    else:
        raise ValueError(f"No doubling probe for {density.domain.kind} in dimension {density.dim}")
    logger.info("Doubling probe on '%s': max ratio %.4f over %d trials", density.measure_id,
                result.max_ratio, trials)
    return result


# ---------------------------------------------------------------------------
# Holder probe
# ---------------------------------------------------------------------------

@dataclass
class DiscreteMap:
    """Transport map known only on a source cloud: source[i] -> image[i]"""
    source: np.ndarray
    image: np.ndarray


def _grid_cloud(domain: DomainSpec, N: int) -> np.ndarray:
    if domain.kind == "unit_disk":
        k = np.arange(N) + 0.5
        r = np.sqrt(k / N)
        theta = k * GOLDEN_ANGLE
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    lo, hi = domain.bounds
    return (lo + (hi - lo) * (np.arange(N) + 0.5) / N)[:, None]


def discrete_ot_map(target: Measure, N: int, seed: int, domain: Optional[DomainSpec] = None) -> DiscreteMap:
    """Exact assignment from a deterministic near-uniform cloud to N i.i.d. target samples"""
    domain = domain or getattr(target, "domain", None) or DomainSpec.interval()
    source = _grid_cloud(domain, N)
    ys = sample(target, N, seed)
    sigma = assignment_exact(cdist(source, ys.points, "sqeuclidean")).sigma
    return DiscreteMap(source, ys.points[sigma])


def _uniform_in(domain: DomainSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if domain.kind == "unit_disk":
        r = np.sqrt(rng.random(n))
        a = 2.0 * np.pi * rng.random(n)
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    lo, hi = domain.bounds
    return lo + (hi - lo) * rng.random((n, domain.dim))


def _sample_pairs(mapping, domain: DomainSpec, pairs: int, r_max: float,
                  rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(mapping, DiscreteMap):
        n = len(mapping.source)
        i = rng.integers(0, n, size=20 * pairs)
        j = rng.integers(0, n, size=20 * pairs)
        dx = np.linalg.norm(mapping.source[i] - mapping.source[j], axis=1)
        keep = np.flatnonzero((i != j) & (dx <= r_max))[:pairs]
        dy = np.linalg.norm(mapping.image[i[keep]] - mapping.image[j[keep]], axis=1)
        return dx[keep], dy

    x = _uniform_in(domain, pairs, rng)
    sep = r_max * np.exp(rng.uniform(math.log(1e-3), 0.0, pairs))
    direction = rng.standard_normal(x.shape)
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x2 = x + sep[:, None] * direction
    inside = domain.contains(x2, tol=0.0)
    x, x2 = x[inside], x2[inside]
    tx = np.asarray(mapping(x), dtype=float).reshape(len(x), -1)
    tx2 = np.asarray(mapping(x2), dtype=float).reshape(len(x2), -1)
    return np.linalg.norm(x - x2, axis=1), np.linalg.norm(tx - tx2, axis=1)


def holder_probe(mapping: Union[Callable, DiscreteMap, TransportNet], domain: DomainSpec,
                 pairs: int = 20_000, seed: int = 0, r_max: Optional[float] = None) -> HolderEstimate:
    """Fit log|T(x) - T(x')| against log|x - x'| over pairs closer than r_max.

    beta is the fitted slope clipped to (0, 1]; the constant is the largest
    ratio |T(x) - T(x')| / |x - x'|^beta over the sampled pairs.
    """
    if pairs < 3:
        raise ValueError(f"pairs must be >= 3, got {pairs}")
    r_max = 0.2 * domain.diameter if r_max is None else r_max
    if isinstance(mapping, TransportNet):
        mapping = as_callable(mapping)
    dx, dy = _sample_pairs(mapping, domain, pairs, r_max, make_rng(seed))

    keep = (dx > 0) & (dy > 0)
    if np.count_nonzero(keep) < 3:
        raise ValueError("All sampled pairs are coincident; no Holder estimate possible")
    log_dx, log_dy = np.log(dx[keep]), np.log(dy[keep])

    (slope, intercept), cov = np.polyfit(log_dx, log_dy, 1, cov="unscaled")
    resid = log_dy - (slope * log_dx + intercept)
    dof = max(1, log_dx.size - 2)
    stderr = math.sqrt(max(0.0, float(cov[0, 0]) * float(resid @ resid) / dof))

    beta = float(min(1.0, max(slope, 1e-6)))
    constant = float(np.max(dy[keep] / dx[keep] ** beta))
    return HolderEstimate(beta, constant, int(log_dx.size), float(r_max), stderr,
                          float(slope - 1.96 * stderr), float(slope))


# ---------------------------------------------------------------------------
# Out-of-distribution target shift
# ---------------------------------------------------------------------------

def _ood_terms(pushed: SampleSet, nu: SampleSet, nu1: SampleSet,
               method: Optional[TransportMethod], shift_w2: Optional[float]) -> Tuple[float, float, float]:
    lhs = _w2(pushed, nu1, method)
    risk = _w2(pushed, nu, method)
    shift = _w2(nu, nu1, method) if shift_w2 is None else shift_w2
    return lhs, risk + shift, shift


def _take(s: SampleSet, idx: slice) -> SampleSet:
    return SampleSet(s.points[idx], s.measure_id, s.seed)


def ood_check(model, mu_val: SampleSet, nu_val: SampleSet, nu1_val: SampleSet,
              method: Optional[TransportMethod] = None, shift_w2: Optional[float] = None,
              blocks: int = 5) -> OODResult:
    """Compare R(T; mu, nu1) with R(T; mu, nu) + W2(nu, nu1) on validation clouds.

    `shift_w2` replaces the empirical W2(nu, nu1) when its population value is
    known. The tolerance is three standard errors of the slack across
    `blocks` disjoint slices.
    """
    if not mu_val.N == nu_val.N == nu1_val.N:
        raise ValueError("ood_check needs equal-size validation clouds")
    pushed = push_forward(model, mu_val)
    lhs, rhs, shift = _ood_terms(pushed, nu_val, nu1_val, method, shift_w2)

    tolerance = 0.0
    size = mu_val.N // blocks if blocks >= 2 else 0
    if size >= 1:
        slacks = []
        for b in range(blocks):
            part = slice(b * size, (b + 1) * size)
            bl, br, _ = _ood_terms(_take(pushed, part), _take(nu_val, part), _take(nu1_val, part),
                                   method, shift_w2)
            slacks.append(br - bl)
        tolerance = 3.0 * _mean_stderr(slacks)[1]

    result = OODResult(lhs, rhs, rhs - lhs, tolerance, shift)
    if result.slack < -result.tolerance:
        logger.warning("OOD bound breached beyond tolerance: slack %.3e, tolerance %.3e",
                       result.slack, result.tolerance)
    return result
