"""Plain SGD with an epoch-indexed learning-rate schedule, global-norm
clipping, early stopping on validation perplexity and checkpoint-on-best."""

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from .errors import DegenerateBatchError, DivergenceError
from .tensor import no_grad

log = logging.getLogger(__name__)

# epoch after which decay starts, divisor applied per further epoch
SCHEDULES = {"ptb": (12, 2.0), "wiki": (14, 1.15)}
METRICS_HEADER = ("epoch", "train_loss", "valid_ppl", "lr", "seconds")


@dataclass
class TrainConfig:
    initial_lr: float = 1.0
    schedule: str = "ptb"
    decay_after: int = None
    decay_factor: float = None
    clip_norm: float = 5.0
    batch_size: int = 32
    patience: int = 10
    max_epochs: int = 100
    seed: int = 0
    record_time: bool = True

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; choose from {sorted(SCHEDULES)}")
        after, factor = SCHEDULES[self.schedule]
        if self.decay_after is None:
            self.decay_after = after
        if self.decay_factor is None:
            self.decay_factor = factor
        if self.initial_lr <= 0 or self.clip_norm <= 0 or self.batch_size < 1:
            raise ValueError("learning rate, clip norm and batch size must be positive")
        if self.decay_factor < 1:
            raise ValueError("decay_factor must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")


def lr_at_epoch(config, epoch):
    """Learning rate for a 1-based epoch: constant through ``decay_after``, then geometric."""
    if epoch < 1:
        raise ValueError(f"epochs are numbered from 1, got {epoch}")
    return config.initial_lr / config.decay_factor ** max(0, epoch - config.decay_after)


def seed_streams(seed):
    """Independent generators for parameter init and dropout, both derived from ``seed``."""
    init_seq, dropout_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(dropout_seq)


def global_norm(params):
    total = 0.0
    for p in params:
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_gradients(params, max_norm=5.0):
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``.

    The loss is already a per-token mean, so no extra batch-size division
    happens here. Returns the scale factor that was applied.
    """
    norm = global_norm(params)
    if not math.isfinite(norm):
        raise DivergenceError(f"gradient norm is {norm}")
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    _scale(params, factor)
    if global_norm(params) > max_norm:
        # rounding in low precision can overshoot by an ulp
        nudge = 1.0 - 4 * max(np.finfo(p.grad.dtype).eps for p in params if p.grad is not None)
        _scale(params, nudge)
        factor *= nudge
    return factor


def _scale(params, factor):
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * p.grad.dtype.type(factor)


def sgd_step(params, lr):
    """``p -= lr * grad`` in place, then clear gradients."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ValueError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
        p.data -= p.data.dtype.type(lr) * p.grad
        p.grad = None


def evaluate(model, batches):
    """Token-weighted ``(perplexity, nll_sum, token_count)`` without dropout."""
    nll, count = 0.0, 0
    with no_grad():
        for batch in batches:
            if not batch.loss_mask[:, 1:].any():
                continue
            out = model.forward_sequence(batch.tokens, batch.loss_mask)
            nll += out.nll_sum
            count += out.token_count
    if count == 0:
        raise DegenerateBatchError("evaluation set has no target tokens")
    mean = nll / count
    return (math.exp(mean) if mean < 700 else math.inf), nll, count


def perplexity(model, batches):
    return evaluate(model, batches)[0]


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    valid_ppl: float
    lr: float
    seconds: float

    def as_csv(self):
        return [self.epoch, repr(self.train_loss), repr(self.valid_ppl), repr(self.lr), f"{self.seconds:.3f}"]


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ppl: float = math.inf
    stopped_epoch: int = 0


class MetricsWriter:
    """Append-only metrics CSV; the seed goes on a leading ``#`` comment line."""

    def __init__(self, path, seed):
        self.path = path
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        if fresh:
            with open(path, "w", newline="") as fh:
                fh.write(f"# seed={seed}\n")
                csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def append(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(row.as_csv())


def read_metrics(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _restore(model, snapshot):
    for (_, dst), (_, src) in zip(model.named_parameters(), snapshot.named_parameters()):
        dst.data[...] = src.data
        dst.grad = None


def train(
    model,
    train_batches,
    valid_batches,
    config,
    checkpoint_path=None,
    metrics_path=None,
    vocab_hash=None,
    on_epoch=None,
    checkpoint_extra=None,
):
    """Train until validation perplexity stops improving for ``patience`` epochs.

    The model is left holding the best-validation parameters. Raises
    ``DivergenceError`` on a non-finite loss or gradient norm, after
    restoring the best parameters seen so far.
    """
    train_batches = list(train_batches)
    valid_batches = list(valid_batches)
    if not train_batches:
        raise DegenerateBatchError("no training batches (corpus smaller than one batch?)")
    _, dropout_rng = seed_streams(config.seed)
    writer = MetricsWriter(metrics_path, config.seed) if metrics_path else None
    params = model.parameters()
    result = TrainResult(model)
    best = model.copy()
    since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        lr = lr_at_epoch(config, epoch)
        nll, count = 0.0, 0
        for batch in train_batches:
            if not batch.loss_mask[:, 1:].any():
                continue
            model.zero_grad()
            out = model.forward_sequence(batch.tokens, batch.loss_mask, rng=dropout_rng if model.config.dropout else None)
            loss = out.loss.item()
            try:
                if not math.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}")
                out.loss.backward()
                clip_gradients(params, config.clip_norm)
            except DivergenceError:
                _restore(model, best)
                raise
            sgd_step(params, lr)
            nll += loss * out.token_count
            count += out.token_count

        valid_ppl = perplexity(model, valid_batches)
        if not math.isfinite(valid_ppl):
            _restore(model, best)
            raise DivergenceError(f"non-finite validation perplexity at epoch {epoch}")
        seconds = time.perf_counter() - started if config.record_time else 0.0
        row = MetricsRow(epoch, nll / max(count, 1), valid_ppl, lr, seconds)
        result.history.append(row)
        if writer:
            writer.append(row)

        if valid_ppl < result.best_valid_ppl:
            result.best_valid_ppl = valid_ppl
            result.best_epoch = epoch
            since_best = 0
            best = model.copy()
            if checkpoint_path:
                meta = checkpoint.CheckpointMeta(
                    seed=config.seed, epoch=epoch, valid_ppl=valid_ppl, vocab_hash=vocab_hash,
                    extra={"train": asdict(config), **(checkpoint_extra or {})},
                )
                checkpoint.save(checkpoint_path, model, meta)
        else:
            since_best += 1
        result.stopped_epoch = epoch
        if on_epoch:
            on_epoch(row)
        log.info("epoch %d: train_loss %.4f valid_ppl %.2f lr %.6g", epoch, row.train_loss, valid_ppl, lr)
        if since_best >= config.patience:
            break

    _restore(model, best)
    return result
