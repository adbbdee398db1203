"""Empirical Wasserstein-2 distances and optimal assignments between point clouds."""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from models import Assignment, SampleSet, W2Result
from seed_manager import make_rng

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX = 9
COMPENSATED_ABOVE = 10_000
TRANSPORT_METHODS = ("exact_lp", "minibatch_refine", "subsample_avg")


@dataclass(frozen=True)
class TransportMethod:
    """How w2_point_clouds couples two clouds"""
    name: str = "exact_lp"
    batch: int = 256  # minibatch_refine subset size
    rounds: int = 2000
    k: int = 10  # subsample_avg draws
    m: int = 1024  # subsample_avg draw size
    max_exact: int = 4096  # memory guard for the dense cost matrix
    seed: int = 0

    def __post_init__(self):
        if self.name not in TRANSPORT_METHODS:
            raise ValueError(f"Unknown transport method '{self.name}', expected one of {TRANSPORT_METHODS}")
        if self.k < 1 or self.m < 1 or self.max_exact < 1 or self.rounds < 0:
            raise ValueError("Transport method parameters must be positive")


def _sum_costs(costs: np.ndarray) -> float:
    if costs.size > COMPENSATED_ABOVE:
        return math.fsum(costs.tolist())
    return float(np.sum(costs))


def _check_pair(xs: SampleSet, ys: SampleSet):
    if xs.N != ys.N:
        raise ValueError(f"Point clouds differ in size: {xs.N} vs {ys.N}")
    if xs.dim != ys.dim:
        raise ValueError(f"Point clouds differ in dimension: {xs.dim} vs {ys.dim}")


def pair_costs(xs: np.ndarray, ys: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Per-pair squared distances |x_i - y_sigma(i)|^2"""
    diff = np.asarray(xs, dtype=float) - np.asarray(ys, dtype=float)[sigma]
    return np.sum(diff ** 2, axis=-1)


def w2_1d(xs: SampleSet, ys: SampleSet) -> W2Result:
    """Exact W2 in one dimension by pairing order statistics"""
    _check_pair(xs, ys)
    if xs.dim != 1:
        raise ValueError(f"w2_1d needs one-dimensional clouds, got d={xs.dim}")
    order_x = np.argsort(xs.points[:, 0], kind="stable")
    order_y = np.argsort(ys.points[:, 0], kind="stable")
    sigma = np.empty(xs.N, dtype=np.int64)
    sigma[order_x] = order_y

    total = _sum_costs((xs.points[order_x, 0] - ys.points[order_y, 0]) ** 2)
    assignment = Assignment(sigma, total, "sorted_1d")
    return W2Result(math.sqrt(total / xs.N), assignment, exact=True, method="sorted_1d")


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1] or cost.shape[0] < 1:
        raise ValueError(f"Cost matrix must be square and nonempty, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("Cost matrix has non-finite entries")
    if np.any(cost < 0):
        raise ValueError("Cost matrix has negative entries")
    return cost


def assignment_exact(cost) -> Assignment:
    """Optimal permutation for a square cost matrix (shortest augmenting paths)"""
    cost = _check_cost(cost)
    rows, cols = linear_sum_assignment(cost)
    sigma = np.empty(cost.shape[0], dtype=np.int64)
    sigma[rows] = cols
    total = _sum_costs(cost[rows, cols])
    return Assignment(sigma, total, "exact_lp")


def brute_force_assignment(cost) -> Assignment:
    """Exhaustive minimum over all permutations; first minimum in lexicographic order wins"""
    cost = _check_cost(cost)
    n = cost.shape[0]
    if n > BRUTE_FORCE_MAX:
        raise ValueError(f"Brute force is limited to N <= {BRUTE_FORCE_MAX}, got {n}")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = cost[np.arange(n), perms].sum(axis=1)
    best = int(np.argmin(totals))
    return Assignment(perms[best], float(totals[best]), "brute_force")


def assignment_minibatch_refine(xs: SampleSet, ys: SampleSet, batch: int, rounds: int,
                                seed: int) -> Assignment:
    """Refine a random coupling by exact reassignment of random subsets of its current pairs.

    A subset is spliced in only when it strictly lowers the exact (fsum) total,
    so the recorded cost history never increases.
    """
    _check_pair(xs, ys)
    n = xs.N
    if not 2 <= batch <= n:
        raise ValueError(f"Batch {batch} outside [2, {n}]")
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")

    rng = make_rng(seed)
    sigma = rng.permutation(n).astype(np.int64)
    costs = pair_costs(xs.points, ys.points, sigma)
    history = [math.fsum(costs.tolist())]

    for _ in range(rounds):
        idx = rng.choice(n, size=batch, replace=False)
        targets = sigma[idx]
        diff = xs.points[idx][:, None, :] - ys.points[targets][None, :, :]
        sub = np.sum(diff ** 2, axis=-1)
        rows, cols = linear_sum_assignment(sub)
        if math.fsum(sub[rows, cols].tolist()) < math.fsum(np.diagonal(sub).tolist()):
            sigma[idx[rows]] = targets[cols]
            costs[idx[rows]] = sub[rows, cols]
        history.append(math.fsum(costs.tolist()))

    logger.debug("Minibatch refine: cost %.6g -> %.6g over %d rounds", history[0], history[-1], rounds)
    return Assignment(sigma, history[-1], "minibatch_refine", tuple(history))


def _exact_w2(xs: SampleSet, ys: SampleSet) -> W2Result:
    if xs.dim == 1:
        return w2_1d(xs, ys)
    cost = cdist(xs.points, ys.points, "sqeuclidean")
    assignment = assignment_exact(cost)
    return W2Result(math.sqrt(assignment.total_sq_cost / xs.N), assignment, exact=True)


def w2_point_clouds(xs: SampleSet, ys: SampleSet,
                    method: Optional[TransportMethod] = None) -> W2Result:
    method = method or TransportMethod()

    if method.name == "subsample_avg":
        if xs.dim != ys.dim:
            raise ValueError(f"Point clouds differ in dimension: {xs.dim} vs {ys.dim}")
        m = min(method.m, xs.N, ys.N)
        if m < method.m:
            logger.debug("subsample_avg: draw size clipped from %d to %d", method.m, m)
        rng = make_rng(method.seed)
        values = []
        for _ in range(method.k):
            sub_x = SampleSet(xs.points[rng.choice(xs.N, m, replace=False)], xs.measure_id, xs.seed)
            sub_y = SampleSet(ys.points[rng.choice(ys.N, m, replace=False)], ys.measure_id, ys.seed)
            values.append(_exact_w2(sub_x, sub_y).value)
        return W2Result(float(np.mean(values)), None, exact=False, method="subsample_avg")

    _check_pair(xs, ys)
    if method.name == "minibatch_refine":
        batch = min(method.batch, xs.N)
        assignment = assignment_minibatch_refine(xs, ys, batch, method.rounds, method.seed)
        exact = batch == xs.N and method.rounds >= 1
        return W2Result(math.sqrt(assignment.total_sq_cost / xs.N), assignment, exact,
                        method="minibatch_refine")

    if xs.N > method.max_exact:
        raise ValueError(
            f"exact_lp refuses N={xs.N} above the cap of {method.max_exact}; use subsample_avg"
        )
    cost = cdist(xs.points, ys.points, "sqeuclidean")
    assignment = assignment_exact(cost)
    return W2Result(math.sqrt(assignment.total_sq_cost / xs.N), assignment, exact=True)


def match(pushed: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Optimal sigma pairing pushed[i] with targets[sigma[i]] under squared cost"""
    pushed = np.asarray(pushed, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if pushed.shape != targets.shape:
        raise ValueError(f"Shape mismatch: {pushed.shape} vs {targets.shape}")
    if pushed.shape[1] == 1:
        sigma = np.empty(len(pushed), dtype=np.int64)
        sigma[np.argsort(pushed[:, 0], kind="stable")] = np.argsort(targets[:, 0], kind="stable")
        return sigma
    return assignment_exact(cdist(pushed, targets, "sqeuclidean")).sigma
