"""The DeepParticle loop: alternate optimal re-matching and Adam steps on the matched loss."""

import logging
import time
from collections import defaultdict
from typing import Optional, Tuple

import numpy as np

from models import NumericalFailure, SampleSet, TrainConfig, TrainHistory, TransportNet, W2Result
from neural_map import adam_step, as_callable, forward, init_optim, loss_and_grad
from seed_manager import make_rng
from transport import TransportMethod, match, w2_1d, w2_point_clouds

logger = logging.getLogger(__name__)


class _BatchStream:
    """Batches drawn without replacement, reshuffled once an epoch is used up"""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        self.n = n
        self.batch = batch
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.batch]
        self.pos += self.batch
        return idx


def train(xs: SampleSet, ys: SampleSet, net: TransportNet,
          cfg: Optional[TrainConfig] = None) -> Tuple[TransportNet, TrainHistory]:
    """Fit T_theta so that T_theta(xs) matches ys under optimal re-matching.

    Returns the iterate with the smallest recorded training loss together with
    the full history. A diverging run stops early and keeps its best finite
    checkpoint.
    """
    cfg = cfg or TrainConfig()
    if xs.N != ys.N:
        raise ValueError(f"Source and target sizes differ: {xs.N} vs {ys.N}")
    if net.d_in != xs.dim or net.d_out != ys.dim:
        raise ValueError(f"Network maps R^{net.d_in} -> R^{net.d_out}, data is {xs.dim} -> {ys.dim}")
    cfg.validate(xs.N)

    rng = make_rng(cfg.seed)
    stream = _BatchStream(xs.N, cfg.resolve_batch(xs.N), rng)
    opt = init_optim(net, cfg.lr, cfg.step_size, cfg.gamma)
    current = net.copy()
    history = TrainHistory()
    timers = defaultdict(float)

    src_idx = tgt_idx = None
    global_sigma = None
    since_best = 0
    history.stopped_reason = "max_iters"

    for it in range(cfg.max_iters):
        refresh = it % cfg.assignment_refresh_every == 0
        tick = time.perf_counter()
        if cfg.global_assignment:
            if refresh:
                global_sigma = match(forward(current, xs.points), ys.points)
            src_idx = stream.next()
            tgt_idx = global_sigma[src_idx]
        elif refresh:
            src_idx = stream.next()
            sigma = match(forward(current, xs.points[src_idx]), ys.points[src_idx])
            tgt_idx = src_idx[sigma]
        timers["assignment"] += time.perf_counter() - tick

        tick = time.perf_counter()
        loss, grads = loss_and_grad(current, xs.points[src_idx], ys.points[tgt_idx])
        timers["gradient"] += time.perf_counter() - tick

        if not np.isfinite(loss) or loss > cfg.divergence_threshold:
            history.diverged = True
            history.stopped_reason = "diverged"
            logger.warning("Training diverged at iteration %d (loss %.3e)", it, loss)
            break

        improved = loss < history.best_loss
        history.losses.append(loss)
        history.lrs.append(opt.learning_rate)
        history.is_best.append(improved)
        if improved:
            history.best_loss = loss
            history.best_iter = it
            history.best_net = current.copy()
            history.best_batch = np.stack([src_idx, tgt_idx], axis=1)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                history.stopped_reason = "patience"
                logger.info("Early stop at iteration %d, best loss %.6g at %d",
                            it, history.best_loss, history.best_iter)
                break

        tick = time.perf_counter()
        current, opt = adam_step(current, grads, opt)
        timers["update"] += time.perf_counter() - tick

    history.phase_seconds = dict(timers)
    if history.best_net is None:
        raise NumericalFailure("Training diverged before any finite loss was recorded")
    logger.info("Training finished (%s) after %d iterations, best loss %.6g",
                history.stopped_reason, len(history.losses), history.best_loss)
    return history.best_net, history


def push_forward(model, xs: SampleSet) -> SampleSet:
    """Apply a TransportNet or a batch callable to every point of xs"""
    pushed = np.asarray(as_callable(model)(xs.points), dtype=float).reshape(xs.N, -1)
    return SampleSet(pushed, f"pushforward({xs.measure_id})", xs.seed)


def validate(model, val_xs: SampleSet, val_ys: SampleSet,
             method: Optional[TransportMethod] = None) -> W2Result:
    """W2 between the pushforward of a validation source sample and a validation target sample"""
    pushed = push_forward(model, val_xs)
    if pushed.dim == 1 and (method is None or method.name == "exact_lp"):
        return w2_1d(pushed, val_ys)
    return w2_point_clouds(pushed, val_ys, method)
