"""PDE-induced target densities and their samplers.

Densities are tabulated on their own grids and normalized so that the
trapezoid rule on that grid gives unit mass. One-dimensional densities carry
a cumulative distribution for inverse-transform sampling; the unit-disk
densities are tabulated on a polar grid but sampled through their closed-form
evaluator.
"""

import logging
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.linalg import null_space
from scipy.sparse.linalg import splu

from models import (
    DomainSpec,
    EllipticCoeffs1D,
    NumericalFailure,
    ParabolicCoeffs1D,
    PointMass,
    SampleSet,
    TabulatedDensity,
    TorusCoeffs1D,
)
from seed_manager import make_rng

logger = logging.getLogger(__name__)

NEGATIVE_TOL = 1e-10
CORNER_TOL = 1e-8
PERIODIC_TOL = 1e-8
DENSE_COND_LIMIT = 2000


def _on_grid(f: Callable, x: np.ndarray) -> np.ndarray:
    """Evaluate a coefficient on the grid, broadcasting constants"""
    return np.array(np.broadcast_to(np.asarray(f(x), dtype=float), x.shape))


def _clamp_negatives(u: np.ndarray, what: str) -> np.ndarray:
    scale = max(1.0, float(np.max(np.abs(u))))
    worst = float(np.min(u))
    if worst < -NEGATIVE_TOL * scale:
        raise NumericalFailure(
            f"{what}: solution value {worst:.3e} violates the maximum principle "
            f"(discretization too coarse)"
        )
    if worst < 0:
        logger.debug("%s: clamped roundoff negatives down to %.3e", what, worst)
    return np.maximum(u, 0.0)


def tabulate_1d(domain: DomainSpec, grid, raw, measure_id: str,
                cdf: Optional[np.ndarray] = None, **evaluators) -> TabulatedDensity:
    """Normalize nonnegative grid values to unit trapezoid mass and attach the cdf"""
    grid = np.asarray(grid, dtype=float)
    raw = np.asarray(raw, dtype=float)
    if grid.ndim != 1 or grid.shape != raw.shape or grid.size < 2:
        raise ValueError(f"'{measure_id}': grid and values must be matching 1D arrays")
    if np.any(np.diff(grid) <= 0):
        raise ValueError(f"'{measure_id}': grid nodes must be strictly increasing")
    if np.any(raw < 0):
        raise ValueError(f"'{measure_id}': density values must be nonnegative")

    mass = float(trapezoid(raw, grid))
    if not np.isfinite(mass) or mass <= 0:
        raise NumericalFailure(f"'{measure_id}': nonpositive total mass {mass:.3e}")
    values = raw / mass

    if cdf is None:
        cdf = cumulative_trapezoid(values, grid, initial=0.0)
        cdf = cdf / cdf[-1]
    cdf = np.maximum.accumulate(np.clip(np.asarray(cdf, dtype=float), 0.0, 1.0))
    cdf[0], cdf[-1] = 0.0, 1.0
    return TabulatedDensity(domain, grid, values, mass, cdf, measure_id, **evaluators)


def _tabulate_disk(profile: Callable, n_r: int, n_theta: int, measure_id: str,
                   envelope: float) -> TabulatedDensity:
    if n_r < 2 or n_theta < 3:
        raise ValueError("Polar grid needs n_r >= 2 and n_theta >= 3")
    r = np.linspace(0.0, 1.0, n_r)
    theta = np.arange(n_theta) * (2.0 * np.pi / n_theta)
    pts = np.stack([np.outer(r, np.cos(theta)), np.outer(r, np.sin(theta))], axis=-1)
    raw = profile(pts)

    density = TabulatedDensity(DomainSpec.unit_disk(), (r, theta), raw, 1.0,
                               measure_id=measure_id, evaluator=profile, envelope=envelope)
    mass = density.total_mass()
    density.values = raw / mass
    density.norm_constant = mass
    return density


# ---------------------------------------------------------------------------
# Finite-difference solvers
# ---------------------------------------------------------------------------

def _check_elliptic(coeffs: EllipticCoeffs1D, x: np.ndarray, allow_trivial: bool = False):
    a = _on_grid(coeffs.a, x)
    b = _on_grid(coeffs.b, x)
    c = _on_grid(coeffs.c, x)
    g = _on_grid(coeffs.g, x)
    if not np.all(np.isfinite(np.concatenate([a, b, c, g]))):
        raise ValueError("Elliptic coefficients must be finite on the grid")
    if np.min(a) <= 0:
        raise ValueError(f"Diffusion a must be uniformly positive, min is {np.min(a):.3e}")
    if np.min(c) < 0:
        raise ValueError("Potential c must be nonnegative")
    if np.min(g) < 0:
        raise ValueError("Forcing g must be nonnegative")
    if coeffs.h0 < 0 or coeffs.h1 < 0:
        raise ValueError("Boundary data h0, h1 must be nonnegative")
    if not allow_trivial and not np.any(g > 0) and coeffs.h0 == 0 and coeffs.h1 == 0:
        raise ValueError("trivial data: forcing g and boundary data h are both identically zero")
    return a, b, c, g


def _interior_operator(x: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Central-difference matrix of L u = -a u'' + b u' + c u on the interior nodes.

    Returns the sparse matrix and the couplings of the first and last interior
    rows to the Dirichlet nodes.
    """
    h = x[1] - x[0]
    ai, bi, ci = a[1:-1], b[1:-1], c[1:-1]
    lower = -ai / h ** 2 - bi / (2.0 * h)
    diag = 2.0 * ai / h ** 2 + ci
    upper = -ai / h ** 2 + bi / (2.0 * h)
    m = diag.size
    A = sparse.diags([lower[1:], diag, upper[:-1]], [-1, 0, 1], shape=(m, m), format="csc")
    return A, lower[0], upper[-1]


def _factorize(A: sparse.spmatrix, what: str):
    try:
        lu = splu(sparse.csc_matrix(A))
    except RuntimeError as exc:
        if A.shape[0] <= DENSE_COND_LIMIT:
            cond = float(np.linalg.cond(A.toarray(), 1))
        else:
            cond = float("inf")
        raise NumericalFailure(f"{what}: singular linear system (condition estimate {cond:.3e})") from exc
    return lu


def _solve(lu, rhs: np.ndarray, what: str) -> np.ndarray:
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise NumericalFailure(f"{what}: linear solve produced non-finite values")
    return sol


def solve_elliptic_1d(coeffs: EllipticCoeffs1D, n_grid: int = 1001) -> TabulatedDensity:
    """Solve -a u'' + b u' + c u = g with u(lo)=h0, u(hi)=h1 and normalize u"""
    if n_grid < 3:
        raise ValueError(f"n_grid must be >= 3, got {n_grid}")
    x = np.linspace(coeffs.lo, coeffs.hi, n_grid)
    a, b, c, g = _check_elliptic(coeffs, x)

    A, lower0, upper1 = _interior_operator(x, a, b, c)
    rhs = g[1:-1].copy()
    rhs[0] -= lower0 * coeffs.h0
    rhs[-1] -= upper1 * coeffs.h1
    interior = _solve(_factorize(A, "elliptic solve"), rhs, "elliptic solve")

    u = np.concatenate([[coeffs.h0], interior, [coeffs.h1]])
    u = _clamp_negatives(u, "elliptic solve")
    logger.info("Solved elliptic problem on %d nodes, integral of u = %.6g", n_grid, trapezoid(u, x))
    return tabulate_1d(DomainSpec.interval(coeffs.lo, coeffs.hi), x, u, "elliptic_1d")


def solve_parabolic_1d(coeffs: ParabolicCoeffs1D, n_grid: int = 1001) -> TabulatedDensity:
    """Crank-Nicolson march of u_t + L u = g to t_end; returns the normalized terminal profile"""
    if n_grid < 3:
        raise ValueError(f"n_grid must be >= 3, got {n_grid}")
    if coeffs.time_steps < 1:
        raise ValueError("time_steps must be >= 1")
    if not coeffs.t_end > 0:
        raise ValueError(f"Terminal time must be positive, got {coeffs.t_end}")
    ell = coeffs.elliptic
    x = np.linspace(ell.lo, ell.hi, n_grid)
    a, b, c, g = _check_elliptic(ell, x, allow_trivial=True)

    u0 = _on_grid(coeffs.rho_init, x)
    if np.min(u0) < -NEGATIVE_TOL:
        raise ValueError("Initial data must be nonnegative")
    for corner, h in ((u0[0], ell.h0), (u0[-1], ell.h1)):
        if abs(corner - h) > CORNER_TOL * max(1.0, abs(h)):
            raise ValueError(f"Initial data {corner:.6g} incompatible with boundary value {h:.6g}")
    if not np.any(u0 > 0) and not np.any(g > 0) and ell.h0 == 0 and ell.h1 == 0:
        raise ValueError("trivial data: initial, forcing and boundary data all vanish")

    dt = coeffs.t_end / coeffs.time_steps
    A, lower0, upper1 = _interior_operator(x, a, b, c)
    eye = sparse.identity(A.shape[0], format="csc")
    implicit = _factorize(eye + 0.5 * dt * A, "Crank-Nicolson step")
    explicit = (eye - 0.5 * dt * A).tocsr()

    forcing = g[1:-1].copy()
    forcing[0] -= lower0 * ell.h0
    forcing[-1] -= upper1 * ell.h1
    forcing *= dt

    interior = u0[1:-1].copy()
    for _ in range(coeffs.time_steps):
        interior = _solve(implicit, explicit @ interior + forcing, "Crank-Nicolson step")

    u = np.concatenate([[ell.h0], interior, [ell.h1]])
    u = _clamp_negatives(u, "parabolic solve")
    logger.info("Marched parabolic problem to T=%.4g in %d steps", coeffs.t_end, coeffs.time_steps)
    return tabulate_1d(DomainSpec.interval(ell.lo, ell.hi), x, u, "parabolic_1d")


def _check_torus(coeffs: TorusCoeffs1D, x: np.ndarray):
    if coeffs.length <= 0:
        raise ValueError("Cell length must be positive")
    if not 0 < coeffs.kappa_minus <= coeffs.kappa_plus:
        raise ValueError("Diffusion bounds need 0 < kappa_minus <= kappa_plus")
    kap = _on_grid(coeffs.kappa, x)
    drift = _on_grid(coeffs.b, x)
    if np.min(kap) < coeffs.kappa_minus * (1 - 1e-12) or np.max(kap) > coeffs.kappa_plus * (1 + 1e-12):
        raise ValueError("Diffusion kappa leaves [kappa_minus, kappa_plus] on the grid")
    ends = np.array([0.0, coeffs.length])
    for name, f in (("b", coeffs.b), ("kappa", coeffs.kappa)):
        v0, v1 = _on_grid(f, ends)
        if abs(v0 - v1) > PERIODIC_TOL * max(1.0, abs(v0)):
            raise ValueError(f"Coefficient {name} is not periodic: {v0:.6g} vs {v1:.6g}")
    return drift, kap


def solve_fp_invariant_1d(coeffs: TorusCoeffs1D, n_grid: int = 1024) -> TabulatedDensity:
    """Invariant density of (kappa m)'' - (b m)' = 0 on the periodic cell [0, L)"""
    if n_grid < 3:
        raise ValueError(f"n_grid must be >= 3, got {n_grid}")
    L = float(coeffs.length)
    h = L / n_grid
    x = np.arange(n_grid) * h
    drift, kap = _check_torus(coeffs, x)

    idx = np.arange(n_grid)
    up = (idx + 1) % n_grid
    down = (idx - 1) % n_grid
    rows = np.concatenate([idx, idx, idx])
    cols = np.concatenate([idx, up, down])
    vals = np.concatenate([
        -2.0 * kap / h ** 2,
        kap[up] / h ** 2 - drift[up] / (2.0 * h),
        kap[down] / h ** 2 + drift[down] / (2.0 * h),
    ])
    M = sparse.coo_matrix((vals, (rows, cols)), shape=(n_grid, n_grid)).toarray()

    kernel = null_space(M)
    if kernel.shape[1] != 1:
        raise NumericalFailure(f"Invariant density: null space has dimension {kernel.shape[1]}, expected 1")
    m = kernel[:, 0]
    m = m * np.sign(np.sum(m))
    if np.min(m) <= 0:
        raise NumericalFailure(f"Invariant density is not strictly positive (min {np.min(m):.3e})")

    grid = np.append(x, L)
    values = np.append(m, m[0])
    logger.info("Invariant density on %d periodic nodes, min/max = %.4g", n_grid, np.min(m) / np.max(m))
    return tabulate_1d(DomainSpec.periodic_cell(L), grid, values, "fp_invariant_1d")


def kpp_tilted_drift(v: Callable, alpha: float, e=1.0) -> Callable:
    """Drift b_alpha(x) = 2 alpha e + v(x) of the tilted KPP diffusion"""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    direction = np.atleast_1d(np.asarray(e, dtype=float))
    if abs(np.linalg.norm(direction) - 1.0) > 1e-12:
        raise ValueError("Direction e must be a unit vector")
    shift = 2.0 * alpha * (direction[0] if direction.size == 1 else direction)

    def drift(x):
        return shift + np.asarray(v(x), dtype=float)

    return drift


# ---------------------------------------------------------------------------
# Closed-form measures
# ---------------------------------------------------------------------------

def exact_map_1d(x):
    """Optimal map from uniform[0,1] to the density x + 1/2; Lipschitz with constant 2"""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("exact_map_1d is defined on [0, 1] only")
    out = 0.5 * (-1.0 + np.sqrt(1.0 + 8.0 * arr))
    return float(out) if out.ndim == 0 else out


def _affine_pdf(y):
    y = np.asarray(y, dtype=float)
    return np.where((y >= 0) & (y <= 1), y + 0.5, 0.0)


def _affine_cdf(y):
    y = np.clip(np.asarray(y, dtype=float), 0.0, 1.0)
    return 0.5 * (y ** 2 + y)


def closed_form_1d(n_grid: int = 1001) -> TabulatedDensity:
    """nu = (x + 1/2) dx on [0, 1], the solution of u'' = 0, u(0)=1/2, u(1)=3/2"""
    x = np.linspace(0.0, 1.0, n_grid)
    return tabulate_1d(DomainSpec.interval(0.0, 1.0), x, x + 0.5, "closed_form_1d",
                       evaluator=_affine_pdf, cdf_evaluator=_affine_cdf,
                       quantile_evaluator=lambda u: exact_map_1d(np.clip(u, 0.0, 1.0)),
                       envelope=1.5)


def _disk_bump(points):
    p = np.asarray(points, dtype=float)
    r2 = np.sum(p ** 2, axis=-1)
    return np.where(r2 <= 1.0, (2.0 / np.pi) * (1.0 - r2), 0.0)


def _disk_flat(points):
    p = np.asarray(points, dtype=float)
    r2 = np.sum(p ** 2, axis=-1)
    return np.where(r2 <= 1.0, 1.0 / np.pi, 0.0)


def closed_form_2d(n_r: int = 201, n_theta: int = 256) -> TabulatedDensity:
    """nu = (2/pi)(1 - |x|^2) on the unit disk, the normalized solution of -Lap u = 1"""
    return _tabulate_disk(_disk_bump, n_r, n_theta, "closed_form_2d", envelope=2.0 / np.pi)


def uniform_interval(lo: float = 0.0, hi: float = 1.0, n_grid: int = 1001) -> TabulatedDensity:
    x = np.linspace(lo, hi, n_grid)
    width = hi - lo
    return tabulate_1d(DomainSpec.interval(lo, hi), x, np.ones_like(x), "uniform_interval",
                       cdf=(x - lo) / width,
                       evaluator=lambda y: np.where((y >= lo) & (y <= hi), 1.0 / width, 0.0),
                       cdf_evaluator=lambda y: np.clip((y - lo) / width, 0.0, 1.0),
                       quantile_evaluator=lambda u: lo + width * np.clip(u, 0.0, 1.0),
                       envelope=1.0 / width)


def uniform_disk(n_r: int = 101, n_theta: int = 128) -> TabulatedDensity:
    return _tabulate_disk(_disk_flat, n_r, n_theta, "uniform_disk", envelope=1.0 / np.pi)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def sample_inverse_cdf(density: TabulatedDensity, N: int, seed: int) -> SampleSet:
    """Inverse-transform sampling through piecewise-linear inversion of the tabulated cdf"""
    if N < 1:
        raise ValueError(f"Sample size must be >= 1, got {N}")
    if density.cdf is None or density.dim != 1:
        raise ValueError(f"'{density.measure_id}' is not a tabulated 1D density")
    u = make_rng(seed).random(N)
    points = np.interp(u, density.cdf, density.grid)
    return SampleSet(points[:, None], density.measure_id, seed, domain=density.domain)


def sample_rejection_disk(density: TabulatedDensity, N: int, seed: int,
                          envelope: Optional[float] = None) -> SampleSet:
    """Rejection sampling from the uniform disk, accepting with probability pdf / envelope"""
    if N < 1:
        raise ValueError(f"Sample size must be >= 1, got {N}")
    if density.domain.kind != "unit_disk":
        raise ValueError(f"'{density.measure_id}' is not a unit-disk density")
    m_env = envelope if envelope is not None else density.envelope
    if m_env is None or m_env <= 0:
        raise ValueError(f"'{density.measure_id}' needs a positive envelope constant")

    rng = make_rng(seed)
    chunks = []
    accepted = 0
    proposals = 0
    while accepted < N:
        batch = max(64, int(np.ceil(1.2 * (N - accepted) * np.pi * m_env)))
        radius = np.sqrt(rng.random(batch))
        angle = 2.0 * np.pi * rng.random(batch)
        pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        f = density.pdf(pts)
        if np.any(f > m_env * (1.0 + 1e-12)):
            raise NumericalFailure(
                f"'{density.measure_id}': envelope violated (pdf {np.max(f):.6g} > {m_env:.6g})"
            )
        keep = rng.random(batch) * m_env < f
        chunks.append(pts[keep])
        accepted += int(np.count_nonzero(keep))
        proposals += batch

    points = np.concatenate(chunks)[:N]
    info = {"acceptance_rate": accepted / proposals, "proposals": float(proposals)}
    return SampleSet(points, density.measure_id, seed, domain=density.domain, info=info)


def sample(measure: Union[TabulatedDensity, PointMass], N: int, seed: int) -> SampleSet:
    if isinstance(measure, PointMass):
        if N < 1:
            raise ValueError(f"Sample size must be >= 1, got {N}")
        points = np.tile(np.asarray(measure.location, dtype=float), (N, 1))
        return SampleSet(points, measure.measure_id, seed)
    if measure.domain.kind == "unit_disk":
        return sample_rejection_disk(measure, N, seed)
    return sample_inverse_cdf(measure, N, seed)


def density_for_example(example: str) -> TabulatedDensity:
    if example == "1d":
        return closed_form_1d()
    if example == "2d":
        return closed_form_2d()
    raise ValueError(f"Unknown example '{example}', expected '1d' or '2d'")


def source_for_example(example: str) -> TabulatedDensity:
    if example == "1d":
        return uniform_interval()
    if example == "2d":
        return uniform_disk()
    raise ValueError(f"Unknown example '{example}', expected '1d' or '2d'")
