"""Maximum-likelihood training of the flow on raw noise samples."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from .. import rng
from ..noise import NoiseBatch
from .model import DET_FLOOR, CompiledFlow, FlowConfig, FlowNumericError, FlowParams, forward_graph, init_params, nll_loss, to_columns

log = logging.getLogger(__name__)

MAX_HALVINGS = 30
MAX_OVERFLOW_FRACTION = 0.01


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, result: "TrainResult | None" = None):
        super().__init__(message)
        self.result = result  # best parameters seen before the abort


@dataclass
class TrainOptions:
    batch_size: int = 1024
    epochs: int = 60
    lr: float = 1e-3
    seed: int = 0
    holdout: int | None = None  # trailing samples kept out of training; default 1/6
    robust_init: bool = True  # actnorm from median/MAD instead of mean/std
    clip_norm: float | None = None  # global gradient-norm ceiling per update
    keep_best: bool = True  # return the parameters of the best held-out epoch


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    holdout_nll: float
    rejected_updates: int
    seconds: float
    skipped_batches: int = 0
    holdout_overflow: int = 0  # held-out samples whose density underflowed


@dataclass
class TrainResult:
    params: FlowParams
    initial_holdout_nll: float
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None  # None: the initial parameters were never beaten

    @property
    def final_nll(self) -> float:
        """Held-out NLL of the returned parameters."""
        if self.best_epoch is None:
            return self.history[-1].holdout_nll if self.history else self.initial_holdout_nll
        return self.history[self.best_epoch].holdout_nll


def _holdout_nll(params: FlowParams, x: np.ndarray) -> tuple[float, int]:
    """Mean held-out NLL over samples with a representable density, and the overflow count."""
    ll = CompiledFlow(params, saturate=True).columns(x)
    ok = np.isfinite(ll)
    if not ok.any():
        return math.inf, int(ll.size)
    return float(-ll[ok].mean()), int(ll.size - ok.sum())


def _clip(plist, ceiling: float) -> None:
    norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in plist))
    if norm > ceiling:
        for p in plist:
            p.grad = p.grad * (ceiling / norm)


def _guard_conv(params: FlowParams, names, before, deltas_by_name) -> int:
    """Shrink any update that pushed a 1x1 conv weight towards singularity."""
    rejected = 0
    for name in names:
        node = params[name]
        step = deltas_by_name[name]
        halvings = 0
        while abs(np.linalg.det(node.value)) < DET_FLOOR:
            halvings += 1
            if halvings > MAX_HALVINGS:
                node.value = before[name]
                break
            step = 0.5 * step
            node.value = before[name] + step
        rejected += halvings > 0
    return rejected


def train(config: FlowConfig, dataset, opts: TrainOptions | None = None) -> TrainResult:
    """Fit a flow by minimising the mean NLL with Adam.

    ``dataset`` is a :class:`NoiseBatch` or a complex ``(L, M)`` array. The
    last ``opts.holdout`` samples are scored after every epoch and never
    trained on.
    """
    opts = opts or TrainOptions()
    samples = dataset.samples if isinstance(dataset, NoiseBatch) else np.asarray(dataset)
    if samples.ndim != 2 or samples.shape[1] != config.dim:
        raise ValueError(f"dataset shape {samples.shape} does not match flow dim {config.dim}")
    n_hold = samples.shape[0] // 6 if opts.holdout is None else opts.holdout
    n_train = samples.shape[0] - n_hold
    if n_train < 2 or n_hold < 1:
        raise ValueError("need at least two training samples and one held-out sample")
    x_all = to_columns(samples)
    x_train, x_hold = x_all[:, :n_train], x_all[:, n_train:]

    params = init_params(config, opts.seed)
    state = ad.AdamState.for_params(params.parameters(), learning_rate=opts.lr)
    conv_names = params.conv_weights()
    plist = params.parameters()
    names = list(params.nodes)
    bs = min(opts.batch_size, n_train)

    # actnorm sees the first batch of the first epoch
    order0 = rng.stream(opts.seed, rng.SHUFFLE, 0).permutation(n_train)
    with ad.no_grad():
        forward_graph(params, x_train[:, order0[:bs]], init_actnorm=True, robust_init=opts.robust_init)
    initial = _holdout_nll(params, x_hold)[0]
    result = TrainResult(params.copy() if opts.keep_best else params, initial)
    best = initial
    ceiling = initial + 9.0 * abs(initial)  # "10x the initial NLL" for positive NLLs
    bad_epochs = 0
    log.info("initial held-out NLL %.5f", initial)

    for epoch in range(opts.epochs):
        t0 = time.perf_counter()
        order = order0 if epoch == 0 else rng.stream(opts.seed, rng.SHUFFLE, epoch).permutation(n_train)
        losses, rejected, skipped = [], 0, 0
        for lo in range(0, n_train - bs + 1, bs):
            batch = x_train[:, order[lo : lo + bs]]
            try:
                loss = nll_loss(params, batch)
            except FlowNumericError as exc:
                # an extreme impulse overflowed a coupling scale; skip this batch
                log.debug("skipped batch at %d: %s", lo, exc)
                skipped += 1
                continue
            ad.backward(loss)
            if opts.clip_norm is not None:
                _clip(plist, opts.clip_norm)
            before = {n: params[n].value for n in conv_names}
            deltas = ad.adam_step(plist, state)
            rejected += _guard_conv(params, conv_names, before, dict(zip(names, deltas)))
            losses.append(loss.item())
        hold, overflow = _holdout_nll(params, x_hold)
        train_nll = float(np.mean(losses)) if losses else math.nan
        rec = EpochRecord(epoch, train_nll, hold, rejected, time.perf_counter() - t0, skipped, overflow)
        result.history.append(rec)
        log.info("epoch %d train %.5f held-out %.5f (%.1fs)", epoch, rec.train_nll, hold, rec.seconds)
        if opts.keep_best and overflow == 0 and hold < best:
            best, result.best_epoch, result.params = hold, epoch, params.copy()
        if not math.isfinite(hold) or overflow > MAX_OVERFLOW_FRACTION * x_hold.shape[1]:
            raise TrainingDivergedError(
                f"held-out density underflowed at epoch {epoch} ({overflow} of {x_hold.shape[1]} samples)",
                result,
            )
        bad_epochs = bad_epochs + 1 if hold > ceiling else 0
        if bad_epochs >= 3:
            raise TrainingDivergedError(
                f"held-out NLL above {ceiling:.4g} for 3 consecutive epochs "
                f"(initial {initial:.4g}, history {[round(r.holdout_nll, 4) for r in result.history]})",
                result,
            )
    if not opts.keep_best:
        result.best_epoch = None
    return result
