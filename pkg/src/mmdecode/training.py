"""Training: hard-negative example sampling, Adam, LR schedule, early stopping.

Training examples pair a segment of preprocessed EEG with the time-aligned
(matched) stimulus-feature segment and a mismatched segment drawn from the
same trial one second after the matched segment ends. Consecutive matched
onsets are one second apart, so 3-second segments overlap by two seconds and
every matched segment reappears as a later example's mismatched segment.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .model import DecoderConfig, DecoderParams, forward_graph, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrialTensors:
    """One trial's aligned EEG and stimulus feature at a common rate."""

    participant_id: str
    trial_id: str
    rate: float
    eeg: np.ndarray      # (channels, samples)
    feature: np.ndarray  # (samples,)

    def __post_init__(self):
        if self.eeg.shape[-1] != self.feature.shape[-1]:
            raise ValueError(
                f"{self.participant_id}/{self.trial_id}: EEG has {self.eeg.shape[-1]} samples "
                f"but feature has {self.feature.shape[-1]}")

    @property
    def n_samples(self) -> int:
        return self.feature.shape[-1]


@dataclass
class ExamplePair:
    """EEG segment plus (matched, mismatched) stimulus segments; views, not copies."""

    eeg: np.ndarray           # (channels, T)
    stim_matched: np.ndarray  # (T,)
    stim_mismatched: np.ndarray
    participant_id: str
    trial_id: str
    onset_seconds: float


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 1e-3
    lr_decay_every: int = 7
    lr_decay_factor: float = 10.0
    patience: int = 5
    max_epochs: int = 50
    segment_seconds: float = 3.0
    stride_seconds: float = 1.0
    mismatch_gap_seconds: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.initial_lr, self.lr_decay_every,
               self.lr_decay_factor, self.patience, self.segment_seconds,
               self.stride_seconds, self.mismatch_gap_seconds) <= 0:
            raise ValueError("all TrainConfig quantities must be positive")
        if self.stride_seconds > self.segment_seconds:
            raise ValueError("stride must not exceed the segment length")


def enumerate_examples(trial: TrialTensors, cfg: TrainConfig) -> list[ExamplePair]:
    """All (matched, mismatched) pairs of a trial, onsets increasing by the stride."""
    return enumerate_pairs(trial, cfg.segment_seconds, cfg.stride_seconds,
                           cfg.mismatch_gap_seconds)


def enumerate_pairs(trial: TrialTensors, segment_seconds: float,
                    stride_seconds: float, gap_seconds: float) -> list[ExamplePair]:
    rate = trial.rate
    seg = int(round(segment_seconds * rate))
    stride = int(round(stride_seconds * rate))
    gap = int(round(gap_seconds * rate))
    span = 2 * seg + gap  # matched + gap + mismatched
    n = trial.n_samples
    if n < span:
        log.warning("trial %s/%s too short for examples (%d < %d samples)",
                    trial.participant_id, trial.trial_id, n, span)
        return []
    out = []
    for onset in range(0, n - span + 1, stride):
        mm = onset + seg + gap
        out.append(ExamplePair(
            eeg=trial.eeg[:, onset:onset + seg],
            stim_matched=trial.feature[onset:onset + seg],
            stim_mismatched=trial.feature[mm:mm + seg],
            participant_id=trial.participant_id,
            trial_id=trial.trial_id,
            onset_seconds=onset / rate,
        ))
    return out


@dataclass
class Batch:
    eeg: np.ndarray          # (B, channels, T)
    stim_first: np.ndarray   # (B, 1, T)
    stim_second: np.ndarray  # (B, 1, T)
    labels: np.ndarray       # (B,) in {0, 1}; 1 iff the matched segment is first


def assemble_batch(examples: list[ExamplePair], labels: np.ndarray,
                   dtype=np.float32) -> Batch:
    eeg = np.stack([e.eeg for e in examples]).astype(dtype, copy=False)
    matched = np.stack([e.stim_matched for e in examples])[:, None, :].astype(dtype, copy=False)
    mism = np.stack([e.stim_mismatched for e in examples])[:, None, :].astype(dtype, copy=False)
    first = np.where(labels[:, None, None] == 1, matched, mism)
    second = np.where(labels[:, None, None] == 1, mism, matched)
    return Batch(eeg=eeg, stim_first=first, stim_second=second,
                 labels=labels.astype(dtype))


def balanced_labels(n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Exactly half 1s (odd n: one extra 1), order shuffled when an rng is given."""
    labels = np.zeros(n, dtype=np.int64)
    labels[: n - n // 2] = 1
    if rng is not None:
        rng.shuffle(labels)
    return labels


def iter_batches(trials: list[TrialTensors], cfg: TrainConfig,
                 rng: np.random.Generator | None):
    """Batches of cfg.batch_size with balanced presentation labels.

    Trial order is shuffled per call when an rng is given; examples within a
    trial stay in temporal order. Without an rng everything is deterministic
    (fixed trial order, alternating labels), which is what validation and
    evaluation use.
    """
    order = list(range(len(trials)))
    if rng is not None:
        order = list(rng.permutation(len(trials)))
    stream: list[ExamplePair] = []
    for ti in order:
        stream.extend(enumerate_examples(trials[ti], cfg))
    bs = cfg.batch_size
    for start in range(0, len(stream), bs):
        chunk = stream[start:start + bs]
        if rng is not None:
            labels = balanced_labels(len(chunk), rng)
        else:
            labels = np.arange(start, start + len(chunk)) % 2  # deterministic alternation
        yield assemble_batch(chunk, np.asarray(labels))


@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter arrays."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0

    @classmethod
    def for_params(cls, params: DecoderParams) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.arrays.items()},
                   v={k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Non-finite gradients skip the step."""
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("skipping update: non-finite gradient (incident %d)", state.skipped)
            return arrays, state
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        arrays[k] -= (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
    return arrays, state


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: learning rate divided by the decay factor every N epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.initial_lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class FitResult:
    params: DecoderParams
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float


def _batch_loss(config: DecoderConfig, tensors: dict[str, ad.Tensor], batch: Batch) -> ad.Tensor:
    y_hat, _, _, _ = forward_graph(
        config, tensors,
        ad.Tensor(batch.eeg), ad.Tensor(batch.stim_first), ad.Tensor(batch.stim_second))
    return ad.mean(ad.bce_loss(y_hat, batch.labels))


def validation_loss(config: DecoderConfig, params: DecoderParams,
                    val_trials: list[TrialTensors], cfg: TrainConfig) -> float:
    """Mean BCE over non-overlapping validation segments, deterministic."""
    val_cfg = replace(cfg, stride_seconds=cfg.segment_seconds)
    tensors = params.as_tensors(requires_grad=False)
    total, count = 0.0, 0
    for batch in iter_batches(val_trials, val_cfg, rng=None):
        loss = _batch_loss(config, tensors, batch)
        total += loss.item() * batch.labels.size
        count += batch.labels.size
    if count == 0:
        raise ValueError("validation set produced no examples")
    return total / count


def fit(decoder: DecoderParams, train_trials: list[TrialTensors],
        val_trials: list[TrialTensors], cfg: TrainConfig,
        out_dir: str | None = None) -> FitResult:
    """Train a decoder until the validation loss stops decreasing.

    The epoch-level trial order is reshuffled every epoch; examples within a
    trial are presented in order. Training stops once no epoch-over-epoch
    decrease of the validation loss has occurred within ``cfg.patience``
    epochs (or at ``cfg.max_epochs``), and the parameters of the epoch with
    the best validation loss are returned. Fully deterministic given
    ``cfg.seed``. The input parameters are not modified.
    """
    if not train_trials or not val_trials:
        raise ValueError("training and validation sets must both be nonempty")
    config = decoder.config
    rng = np.random.default_rng(cfg.seed)
    params = decoder.copy()
    state = AdamState.for_params(params)

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "train_config.txt"), "w") as fh:
            for k, v in vars(cfg).items():
                fh.write(f"{k} = {v}\n")
        metrics_fh = open(os.path.join(out_dir, "metrics.log"), "w")
        metrics_fh.write("epoch\ttrain_loss\tval_loss\tlr\n")

    history: list[EpochRecord] = []
    best_params = params.copy()
    best_val = np.inf
    best_epoch = -1
    prev_val = np.inf
    since_decrease = 0
    try:
        for epoch in range(cfg.max_epochs):
            lr = lr_schedule(epoch, cfg)
            t0 = time.time()
            total, count = 0.0, 0
            for batch in iter_batches(train_trials, cfg, rng):
                tensors = params.as_tensors(requires_grad=True)
                loss = _batch_loss(config, tensors, batch)
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(
                        f"non-finite training loss at epoch {epoch}, step {state.step}")
                loss.backward()
                grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
                adam_step(params.arrays, grads, state, lr)
                total += loss.item() * batch.labels.size
                count += batch.labels.size
            train_loss = total / max(count, 1)
            val_loss = validation_loss(config, params, val_trials, cfg)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
            history.append(EpochRecord(epoch, train_loss, val_loss, lr))
            if metrics_fh is not None:
                metrics_fh.write(f"{epoch}\t{train_loss:.6f}\t{val_loss:.6f}\t{lr:g}\n")
                metrics_fh.flush()
            log.info("epoch %d: train %.4f val %.4f lr %g (%.1fs)",
                     epoch, train_loss, val_loss, lr, time.time() - t0)

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_params = params.copy()
            # Patience counts epochs since the validation loss last decreased
            # relative to the previous epoch (the first epoch counts as one).
            if epoch == 0 or val_loss < prev_val:
                since_decrease = 0
            else:
                since_decrease += 1
            prev_val = val_loss
            if since_decrease >= cfg.patience:
                log.info("early stop after epoch %d (no decrease within %d epochs)",
                         epoch, cfg.patience)
                break
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if best_epoch < 0:  # max_epochs == 0
        best_params, best_val, best_epoch = params.copy(), np.nan, -1
    if out_dir is not None:
        save_checkpoint(best_params, os.path.join(out_dir, "best.ckpt"))
    return FitResult(params=best_params, history=history,
                     best_epoch=best_epoch, best_val_loss=float(best_val))


def fine_tune(population_params: DecoderParams, train_trials: list[TrialTensors],
              val_trials: list[TrialTensors], cfg: TrainConfig,
              out_dir: str | None = None) -> FitResult:
    """Resume training from population parameters on one participant's data.

    Optimizer state and the learning-rate schedule start fresh; the supplied
    population parameters are left untouched.
    """
    if not train_trials or not val_trials:
        raise ValueError("fine-tuning needs nonempty train and validation portions")
    return fit(population_params, train_trials, val_trials, cfg, out_dir=out_dir)
