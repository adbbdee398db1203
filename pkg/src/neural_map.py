import logging
import math
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import svdvals

from models import ApproxBudget, NumericalFailure, OptimState, SampleSet, TransportNet
from seed_manager import make_rng

logger = logging.getLogger(__name__)


class ParamGrads(NamedTuple):
    weights: List[np.ndarray]
    biases: List[np.ndarray]


def init_net(layer_dims: Sequence[int], seed: int) -> TransportNet:
    """He initialization: weights ~ Normal(0, 2 / fan_in), biases zero"""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"Need at least two positive layer sizes, got {dims}")
    rng = make_rng(seed)
    weights = [rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
               for fan_in, fan_out in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(fan_out) for fan_out in dims[1:]]
    return TransportNet(tuple(dims), weights, biases, seed)


def identity_net(d: int, width: Optional[int] = None, noise: float = 0.0, seed: int = 0) -> TransportNet:
    """One-hidden-layer ReLU net computing x = relu(x) - relu(-x) exactly.

    Extra hidden units beyond 2d start at zero; `noise` adds Normal(0, noise^2)
    perturbations to every weight for near-identity starts.
    """
    width = 2 * d if width is None else int(width)
    if width < 2 * d:
        raise ValueError(f"Identity embedding needs width >= {2 * d}, got {width}")
    eye = np.eye(d)
    w1 = np.zeros((width, d))
    w1[:2 * d] = np.vstack([eye, -eye])
    w2 = np.zeros((d, width))
    w2[:, :2 * d] = np.hstack([eye, -eye])
    if noise > 0:
        rng = make_rng(seed)
        w1 = w1 + noise * rng.standard_normal(w1.shape)
        w2 = w2 + noise * rng.standard_normal(w2.shape)
    return TransportNet((d, width, d), [w1, w2], [np.zeros(width), np.zeros(d)], seed)


def _as_batch(net: TransportNet, x) -> Tuple[np.ndarray, bool]:
    if isinstance(x, SampleSet):
        x = x.points
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    arr = arr.reshape(1, -1) if single else arr
    if arr.ndim != 2 or arr.shape[1] != net.d_in:
        raise ValueError(f"Input of shape {np.shape(x)} does not match d_in={net.d_in}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("Network input must be finite")
    return arr, single


def forward_trace(net: TransportNet, x) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Activations (input first, output last) and pre-activations of every layer"""
    h, _ = _as_batch(net, x)
    acts, pre = [h], []
    last = len(net.weights) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            z = h @ w.T + b
            if not np.all(np.isfinite(z)):
                raise NumericalFailure(f"Non-finite pre-activation in layer {l}")
            pre.append(z)
            h = z if l == last else np.maximum(z, 0.0)
            acts.append(h)
    return acts, pre


def forward(net: TransportNet, x) -> np.ndarray:
    """Evaluate T_theta on a point (d_in,) or a batch (N, d_in)"""
    _, single = _as_batch(net, x)
    out = forward_trace(net, x)[0][-1]
    return out[0] if single else out


def loss_and_grad(net: TransportNet, xs, ys_matched) -> Tuple[float, ParamGrads]:
    """Mean squared error against pre-matched targets and its exact gradient.

    ReLU subgradient at zero is taken as zero.
    """
    acts, pre = forward_trace(net, xs)
    targets = ys_matched.points if isinstance(ys_matched, SampleSet) else np.asarray(ys_matched, dtype=float)
    targets = targets.reshape(len(targets), -1)
    if targets.shape != acts[-1].shape:
        raise ValueError(f"Targets of shape {targets.shape} do not match outputs {acts[-1].shape}")

    n = targets.shape[0]
    resid = acts[-1] - targets
    loss = float(np.sum(resid ** 2) / n)

    grad_w: List[np.ndarray] = [None] * len(net.weights)
    grad_b: List[np.ndarray] = [None] * len(net.biases)
    delta = 2.0 * resid / n
    for l in range(len(net.weights) - 1, -1, -1):
        grad_w[l] = delta.T @ acts[l]
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ net.weights[l]) * (pre[l - 1] > 0)
    return loss, ParamGrads(grad_w, grad_b)


def init_optim(net: TransportNet, lr: float = 1e-2, step_size: int = 500, gamma: float = 0.9) -> OptimState:
    zeros_w = [np.zeros_like(w) for w in net.weights]
    zeros_b = [np.zeros_like(b) for b in net.biases]
    return OptimState([z.copy() for z in zeros_w], zeros_w, [z.copy() for z in zeros_b], zeros_b,
                      base_lr=lr, step_size=step_size, gamma=gamma)


def adam_step(net: TransportNet, grads: ParamGrads, opt: OptimState) -> Tuple[TransportNet, OptimState]:
    """One Adam update at the StepLR rate of the current step; inputs are not mutated"""
    if len(grads.weights) != len(net.weights) or len(grads.biases) != len(net.biases):
        raise ValueError("Gradient structure does not match the network")
    lr = opt.learning_rate
    t = opt.step + 1
    c1 = 1.0 - opt.beta1 ** t
    c2 = 1.0 - opt.beta2 ** t

    def update(params, g_list, m_list, v_list):
        new_p, new_m, new_v = [], [], []
        for p, g, m, v in zip(params, g_list, m_list, v_list):
            if g.shape != p.shape:
                raise ValueError(f"Gradient shape {g.shape} does not match parameter {p.shape}")
            m = opt.beta1 * m + (1.0 - opt.beta1) * g
            v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
            new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + opt.eps))
            new_m.append(m)
            new_v.append(v)
        return new_p, new_m, new_v

    weights, m_w, v_w = update(net.weights, grads.weights, opt.m_weights, opt.v_weights)
    biases, m_b, v_b = update(net.biases, grads.biases, opt.m_biases, opt.v_biases)
    new_opt = OptimState(m_w, v_w, m_b, v_b, opt.base_lr, opt.step_size, opt.gamma, t,
                         opt.beta1, opt.beta2, opt.eps)
    return TransportNet(net.layer_dims, weights, biases, net.seed), new_opt


def spectral_norm(w: np.ndarray) -> float:
    """Largest singular value from the LAPACK SVD; exact to rounding, so the product bound stays certified"""
    w = np.asarray(w, dtype=float)
    if not np.any(w):
        return 0.0
    return float(svdvals(w)[0])


def lipschitz_upper_bound(net: TransportNet) -> float:
    """Product of layerwise spectral norms; ReLU is 1-Lipschitz"""
    return float(np.prod([spectral_norm(w) for w in net.weights]))


def _int_root(n: int, d: int) -> int:
    r = int(round(n ** (1.0 / d)))
    while r ** d > n:
        r -= 1
    while (r + 1) ** d <= n:
        r += 1
    return r


def approx_budget(W: int, L: int, alpha: float, lambda_h: float, B: float, d: int) -> ApproxBudget:
    """Approximation error bound for alpha-Holder maps on [-B, B]^d and the prescribed architecture"""
    if min(W, L, d) < 1 or not (alpha > 0 and lambda_h > 0 and B > 0):
        raise ValueError("approx_budget needs positive W, L, alpha, lambda_H, B and d")
    if alpha > 1:
        raise ValueError(f"Holder exponent must lie in (0, 1], got {alpha}")
    rate = -2.0 * alpha / d
    bound = 19.0 * math.sqrt(d) * lambda_h * (2.0 * B) ** alpha * float(W) ** rate * float(L) ** rate
    width = 3 ** (d + 3) * max(d * _int_root(int(W), d), int(W) + 1)
    depth = 12 * int(L) + 14 + 2 * d
    return ApproxBudget(int(W), int(L), float(alpha), float(lambda_h), float(B), int(d),
                        bound, width, depth)


def as_callable(model: Union[TransportNet, object]):
    """Wrap a TransportNet (or any callable on (N, d) arrays) as a batch map"""
    if isinstance(model, TransportNet):
        return lambda pts: forward(model, pts)
    if not callable(model):
        raise ValueError(f"Expected a TransportNet or callable, got {type(model).__name__}")
    return model
