"""Adam and the training harness for the six strategies.

Each epoch every training example is used once: both domains are shuffled
into batches, and the order in which source and target batches are visited
is itself a seeded shuffle. Early stopping watches a development loss and
returns the best checkpoint, not the last one.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import heads
from .data import DomainDataset, Example
from .heads import AUGMENTED, DUAL, SINGLE, DomainTag
from .mathcore import Rng
from .model import ModelParams, init_params, pad_batch, trunk_backward, trunk_forward


class Strategy(str, enum.Enum):
    SRC_ONLY = "srconly"
    TGT_ONLY = "tgtonly"
    ALL = "all"
    FINE_TUNE = "finetune"
    DUAL = "dual"
    PROPOSED = "proposed"


STRATEGY_ORDER = tuple(Strategy)

HEAD_FOR = {
    Strategy.SRC_ONLY: SINGLE,
    Strategy.TGT_ONLY: SINGLE,
    Strategy.ALL: SINGLE,
    Strategy.FINE_TUNE: SINGLE,
    Strategy.DUAL: DUAL,
    Strategy.PROPOSED: AUGMENTED,
}


class MissingDataError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    strategy: Strategy = Strategy.PROPOSED
    n: int = 300
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 3
    seed: int = 0
    clip: float | None = None
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init_scale: float = 0.08
    # None means max_epochs
    finetune_target_epochs: int | None = None
    finetune_reset_adam: bool = True
    # "bound" trains the augmented head through the upper bound, "exact"
    # through the cross-entropy of the composed weights
    objective: str = "bound"
    eval_batch: int = 64

    def __post_init__(self):
        self.strategy = Strategy(self.strategy)
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n < 1 or self.max_epochs < 0:
            raise ValueError("n must be >= 1 and max_epochs >= 0")
        if self.objective not in ("bound", "exact"):
            raise ValueError(f"objective must be bound or exact, got {self.objective!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        return d


# ---- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # step counts are kept per parameter: a block that received no gradient
    # in a batch is not touched, so its bias correction must not advance
    t: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
    """Update ``params`` in place for every key present in ``grads``."""
    for key, g in grads.items():
        p = params[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {key} has shape {g.shape}, parameter has {p.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
            state.t[key] = 0
        state.t[key] += 1
        t = state.t[key]
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p -= state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)


# ---- scheduling / stopping -----------------------------------------------------------

def epoch_schedule(rng: Rng, n_source_batches: int, n_target_batches: int) -> list[DomainTag]:
    tags = [DomainTag.SOURCE] * n_source_batches + [DomainTag.TARGET] * n_target_batches
    return [tags[i] for i in rng.permutation(len(tags))]


def early_stop(dev_losses: list[float], patience: int) -> bool:
    """True once the best dev loss is ``patience`` or more epochs old."""
    if not dev_losses:
        raise ValueError("early_stop needs at least one dev loss")
    best = int(np.argmin(dev_losses))
    return len(dev_losses) - 1 - best >= patience


def best_epoch(dev_losses: list[float]) -> int:
    """1-based epoch of the first minimum."""
    return int(np.argmin(dev_losses)) + 1


# ---- losses over a batch ---------------------------------------------------------

@dataclass
class BatchResult:
    loss: float
    tokens: int
    grads: dict
    gap: float = 0.0


def _flat_targets(tape):
    mask = tape.mask
    H = tape.H[mask]
    Y = tape.tokens[:, 1:].T[mask]
    return mask, H, Y


def batch_loss(params: ModelParams, examples: list[Example], tag: DomainTag, objective: str = "bound",
               with_gap: bool = False) -> BatchResult:
    """Objective (summed token loss / batch size) and gradients for one batch.

    Only the head blocks that belong to ``tag`` get a gradient entry.
    """
    tag = DomainTag(tag)
    ctx = np.stack([ex.ctx for ex in examples])
    tape = trunk_forward(params, ctx, pad_batch([ex.tokens for ex in examples]))
    mask, H, Y = _flat_targets(tape)
    scale = 1.0 / len(examples)
    head = params.head
    gap = 0.0
    head_grads = {}
    if head.variant == AUGMENTED:
        g = head.mats["theta_g"]
        dkey = "theta_s" if tag is DomainTag.SOURCE else "theta_t"
        d = head.mats[dkey]
        if objective == "bound":
            total, dg, dd, dHf = heads.augmented_loss_rows(g, d, H, Y, scale)
            if with_gap:
                exact = heads.ce_loss_rows(g + d, H, Y)[0]
                gap = total - exact
            head_grads = {"head.theta_g": dg, "head." + dkey: dd}
        else:
            total, dW, dHf = heads.ce_loss_rows(g + d, H, Y, scale)
            head_grads = {"head.theta_g": dW, "head." + dkey: dW.copy()}
    else:
        key = heads.domain_keys(head, tag)[0]
        total, dW, dHf = heads.ce_loss_rows(head.mats[key], H, Y, scale)
        head_grads = {"head." + key: dW}
    dH = np.zeros_like(tape.H)
    dH[mask] = dHf
    grads = trunk_backward(params, tape, dH)
    grads.update(head_grads)
    return BatchResult(total * scale, int(len(Y)), grads, gap)


def corpus_nll(params: ModelParams, examples: list[Example], tag: DomainTag, chunk: int = 64) -> tuple[float, int]:
    """Total NLL and predicted-token count using evaluation-time weights."""
    W = heads.eval_weight(params.head, tag)
    total = 0.0
    count = 0
    for start in range(0, len(examples), chunk):
        part = examples[start:start + chunk]
        ctx = np.stack([ex.ctx for ex in part])
        tape = trunk_forward(params, ctx, pad_batch([ex.tokens for ex in part]))
        _, H, Y = _flat_targets(tape)
        total += heads.ce_loss_rows(W, H, Y)[0]
        count += len(Y)
    return total, count


def mean_nll(params: ModelParams, examples: list[Example], tag: DomainTag, chunk: int = 64) -> float:
    total, count = corpus_nll(params, examples, tag, chunk)
    return total / count if count else float("nan")


# ---- harness -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    phase: str
    epoch: int
    # None when the phase saw no batches of that domain
    source_train_loss: float | None
    target_train_loss: float | None
    dev_loss: float
    bound_gap: float | None = None


@dataclass
class RunMetrics:
    strategy: str
    seed: int
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: dict = field(default_factory=dict)
    evaluation: dict = field(default_factory=dict)

    def dev_losses(self, phase: str | None = None) -> list[float]:
        return [r.dev_loss for r in self.epochs if phase is None or r.phase == phase]

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "epochs": [dataclasses.asdict(r) for r in self.epochs],
            "best_epoch": dict(self.best_epoch),
            "evaluation": dict(self.evaluation),
        }


def _clip(grads: dict, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s


def _batches(rng: Rng, examples: list[Example], size: int) -> list[list[Example]]:
    order = rng.permutation(len(examples))
    return [[examples[i] for i in order[k:k + size]] for k in range(0, len(order), size)]


def train_phase(params: ModelParams, cfg: TrainConfig, source: list[Example], target: list[Example],
                dev: list[Example], dev_tag: DomainTag, phase: str, max_epochs: int,
                metrics: RunMetrics, on_epoch: Callable[[EpochRecord], None] | None = None,
                adam: AdamState | None = None, stream: str | None = None) -> tuple[ModelParams, AdamState]:
    """Train in place until early stopping; returns (best params, optimizer state).

    The shuffling stream depends only on the seed and ``stream`` (default:
    the phase name), so a phase restarted from a saved checkpoint replays the
    same batches.
    """
    rng = Rng(cfg.seed).derive("shuffle:" + (stream or phase))
    if adam is None:
        adam = AdamState(cfg.alpha, cfg.beta1, cfg.beta2, cfg.eps)
    live = params.named()
    best = params.copy()
    dev_losses: list[float] = []
    want_gap = params.head.variant == AUGMENTED and cfg.objective == "bound"
    for epoch in range(1, max_epochs + 1):
        pools = {
            DomainTag.SOURCE: _batches(rng, source, cfg.batch_size),
            DomainTag.TARGET: _batches(rng, target, cfg.batch_size),
        }
        schedule = epoch_schedule(rng, len(pools[DomainTag.SOURCE]), len(pools[DomainTag.TARGET]))
        cursor = {DomainTag.SOURCE: 0, DomainTag.TARGET: 0}
        sums = {DomainTag.SOURCE: [0.0, 0], DomainTag.TARGET: [0.0, 0]}
        gap_sum = 0.0
        for b, tag in enumerate(schedule):
            batch = pools[tag][cursor[tag]]
            cursor[tag] += 1
            res = batch_loss(params, batch, tag, cfg.objective, with_gap=want_gap)
            if not math.isfinite(res.loss):
                raise NumericError(f"non-finite loss in {phase} epoch {epoch} batch {b}", epoch, b)
            if cfg.clip is not None:
                _clip(res.grads, cfg.clip)
            adam_step(adam, live, res.grads)
            sums[tag][0] += res.loss * len(batch)
            sums[tag][1] += res.tokens
            gap_sum += res.gap * len(batch)
        dev_loss = mean_nll(params, dev, dev_tag, cfg.eval_batch)
        if not math.isfinite(dev_loss):
            raise NumericError(f"non-finite dev loss in {phase} epoch {epoch}", epoch, len(schedule))
        n_tok = sums[DomainTag.SOURCE][1] + sums[DomainTag.TARGET][1]
        rec = EpochRecord(
            phase,
            epoch,
            sums[DomainTag.SOURCE][0] / sums[DomainTag.SOURCE][1] if sums[DomainTag.SOURCE][1] else None,
            sums[DomainTag.TARGET][0] / sums[DomainTag.TARGET][1] if sums[DomainTag.TARGET][1] else None,
            dev_loss,
            gap_sum / n_tok if want_gap and n_tok else None,
        )
        metrics.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if not dev_losses or dev_loss < min(dev_losses):
            best = params.copy()
        dev_losses.append(dev_loss)
        if early_stop(dev_losses, cfg.patience):
            break
    if dev_losses:
        metrics.best_epoch[phase] = best_epoch(dev_losses)
    return best, adam


def _require(cond: bool, message: str):
    if not cond:
        raise MissingDataError(message)


def init_for(cfg: TrainConfig, vocab_size: int, d_ctx: int) -> ModelParams:
    return init_params(vocab_size, cfg.n, d_ctx, HEAD_FOR[cfg.strategy], Rng(cfg.seed).derive("init"), cfg.init_scale)


def run_strategy(cfg: TrainConfig, source: DomainDataset | None, target: DomainDataset | None,
                 on_epoch: Callable[[EpochRecord], None] | None = None,
                 init: ModelParams | None = None) -> tuple[ModelParams, RunMetrics]:
    s = cfg.strategy
    src_train = source.train if source is not None else []
    tgt_train = target.train if target is not None else []
    any_ds = source if source is not None else target
    _require(any_ds is not None, "no dataset given")
    if source is not None and target is not None and source.vocab != target.vocab:
        raise MissingDataError("source and target datasets use different vocabularies")
    examples = src_train + tgt_train + (any_ds.dev if any_ds else [])
    _require(bool(examples), "datasets are empty")
    d_ctx = examples[0].ctx.shape[0]
    params = init.copy() if init is not None else init_for(cfg, len(any_ds.vocab), d_ctx)
    metrics = RunMetrics(s.value, cfg.seed)

    def needs_target_dev():
        _require(target is not None and len(target.dev) > 0, f"{s.value} needs a target dev set")

    if s is Strategy.SRC_ONLY:
        _require(len(src_train) > 0 and len(source.dev) > 0, "srconly needs source train and dev data")
        params, _ = train_phase(params, cfg, src_train, [], source.dev, DomainTag.SOURCE, "main",
                                cfg.max_epochs, metrics, on_epoch)
    elif s is Strategy.TGT_ONLY:
        _require(len(tgt_train) > 0, "tgtonly needs target training data")
        needs_target_dev()
        params, _ = train_phase(params, cfg, [], tgt_train, target.dev, DomainTag.TARGET, "main",
                                cfg.max_epochs, metrics, on_epoch)
    elif s is Strategy.FINE_TUNE:
        _require(len(src_train) > 0 and len(source.dev) > 0, "finetune needs source train and dev data")
        # same batch stream as SrcOnly, so phase one reproduces the SrcOnly model
        params, adam = train_phase(params, cfg, src_train, [], source.dev, DomainTag.SOURCE,
                                   "finetune-source", cfg.max_epochs, metrics, on_epoch, stream="main")
        epochs = cfg.max_epochs if cfg.finetune_target_epochs is None else cfg.finetune_target_epochs
        if epochs > 0:
            _require(len(tgt_train) > 0, "finetune needs target training data")
            needs_target_dev()
            params, _ = finetune_target_phase(params, cfg, target, metrics, on_epoch,
                                              None if cfg.finetune_reset_adam else adam)
    else:
        _require(len(src_train) + len(tgt_train) > 0, f"{s.value} needs training data")
        needs_target_dev()
        params, _ = train_phase(params, cfg, src_train, tgt_train, target.dev, DomainTag.TARGET, "main",
                                cfg.max_epochs, metrics, on_epoch)
    return params, metrics


def finetune_target_phase(params: ModelParams, cfg: TrainConfig, target: DomainDataset, metrics: RunMetrics,
                          on_epoch=None, adam: AdamState | None = None):
    """Second FineTune phase: continue from ``params`` on target data only."""
    epochs = cfg.max_epochs if cfg.finetune_target_epochs is None else cfg.finetune_target_epochs
    return train_phase(params.copy(), cfg, [], target.train, target.dev, DomainTag.TARGET,
                       "finetune-target", epochs, metrics, on_epoch, adam)
