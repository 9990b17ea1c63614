"""Subject-disjoint folds, class-balanced batches, multi-similarity loss, Adam
with a one-cycle cosine schedule, and per-fold training."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .net import ModelCheckpoint, ModelParams, NetConfig, forward_batch, init_model
from .prep import VelocityWindow

log = logging.getLogger(__name__)


class TrainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# folds


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of_subject: dict[str, int]
    held_out: frozenset[str] = frozenset()

    def __post_init__(self):
        overlap = self.held_out & set(self.fold_of_subject)
        if overlap:
            raise TrainError(f"held-out subjects also assigned to folds: {sorted(overlap)}")
        if any(not 0 <= f < self.k for f in self.fold_of_subject.values()):
            raise TrainError("fold index out of range")

    def subjects_in(self, fold: int) -> set[str]:
        return {s for s, f in self.fold_of_subject.items() if f == fold}

    def training_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.fold_of_subject.items() if f != fold}

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "fold_of_subject": dict(sorted(self.fold_of_subject.items())),
            "held_out": sorted(self.held_out),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FoldAssignment":
        return cls(int(d["k"]), {str(s): int(f) for s, f in d["fold_of_subject"].items()}, frozenset(d["held_out"]))


def assign_folds(
    recording_counts: Mapping[str, int],
    k: int = 4,
    held_out: Iterable[str] = (),
) -> FoldAssignment:
    """Greedy balance of subjects into ``k`` folds by recording count.

    Subjects are taken in order of decreasing count (ties broken by id) and
    each goes to the fold with the smallest cumulative count so far (ties to
    the lower fold index). Held-out subjects are excluded from every fold.
    """
    if k < 2:
        raise TrainError("need k >= 2 folds")
    held = frozenset(held_out)
    unknown = held - set(recording_counts)
    if unknown:
        raise TrainError(f"held-out ids not among subjects: {sorted(unknown)}")
    pool = [s for s in recording_counts if s not in held]
    if len(pool) < k:
        raise TrainError(f"{len(pool)} non-held-out subjects cannot fill {k} folds")
    order = sorted(pool, key=lambda s: (-recording_counts[s], s))
    loads = [0] * k
    fold_of = {}
    for s in order:
        f = min(range(k), key=lambda i: (loads[i], i))
        fold_of[s] = f
        loads[f] += recording_counts[s]
    return FoldAssignment(k, fold_of, held)


def fold_loads(assignment: FoldAssignment, recording_counts: Mapping[str, int]) -> list[int]:
    loads = [0] * assignment.k
    for s, f in assignment.fold_of_subject.items():
        loads[f] += recording_counts[s]
    return loads


# ---------------------------------------------------------------------------
# batches


def sample_batch(
    windows_by_class: Mapping[Hashable, Sequence],
    rng: np.random.Generator,
    classes_per_batch: int = 8,
    samples_per_class: int = 8,
) -> tuple[list, np.ndarray]:
    """Draw ``classes_per_batch`` distinct classes, then ``samples_per_class``
    items from each (with replacement only when a class is too small).

    Returns the items and an integer label array indexing ``sorted(classes)``.
    """
    classes = sorted(c for c, items in windows_by_class.items() if len(items) > 0)
    if len(classes) < classes_per_batch:
        raise TrainError(f"need {classes_per_batch} classes per batch, only {len(classes)} available")
    chosen = rng.choice(len(classes), size=classes_per_batch, replace=False)
    items, labels = [], []
    for ci in chosen:
        pool = windows_by_class[classes[ci]]
        replace = len(pool) < samples_per_class
        picks = rng.choice(len(pool), size=samples_per_class, replace=replace)
        items.extend(pool[int(j)] for j in picks)
        labels.extend([int(ci)] * samples_per_class)
    return items, np.asarray(labels)


# ---------------------------------------------------------------------------
# multi-similarity loss


@dataclass(frozen=True)
class MSLossHParams:
    alpha: float = 2.0
    beta: float = 50.0
    base: float = 0.5
    epsilon: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise TrainError("alpha and beta must be positive")
        if self.epsilon < 0:
            raise TrainError("epsilon must be non-negative")
        if not -1 <= self.base <= 1:
            raise TrainError("base must lie in [-1, 1]")


def mine_pairs(sim: np.ndarray, labels: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (anchor, other) masks of mined positive and negative pairs.

    A positive is kept if it is less similar than the anchor's hardest
    negative plus ``epsilon``; a negative is kept if it is more similar than
    the anchor's hardest positive minus ``epsilon``. An anchor lacking
    negatives keeps all its positives, and vice versa.
    """
    n = len(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(n, dtype=bool)
    neg = ~same
    has_pos = pos.any(axis=1)
    has_neg = neg.any(axis=1)
    hardest_neg = np.where(neg, sim, -np.inf).max(axis=1)
    hardest_pos = np.where(pos, sim, np.inf).min(axis=1)
    mined_pos = pos & ((sim < (hardest_neg + epsilon)[:, None]) | ~has_neg[:, None])
    mined_neg = neg & ((sim > (hardest_pos - epsilon)[:, None]) | ~has_pos[:, None])
    return mined_pos, mined_neg


def ms_loss(
    embeddings: np.ndarray,
    labels: Sequence,
    hp: MSLossHParams = MSLossHParams(),
) -> tuple[float, np.ndarray]:
    """Multi-similarity loss on cosine similarities and its exact gradient.

    Embeddings are length-normalized here; the returned gradient is with
    respect to the raw (unnormalized) embeddings. Mining is treated as fixed
    when differentiating.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if e.ndim != 2 or len(e) != len(labels):
        raise TrainError("embeddings must be (batch, dim) with one label per row")
    n = len(e)
    if n < 2:
        raise TrainError("ms_loss needs at least 2 embeddings")
    same = labels[:, None] == labels[None, :]
    if not (same & ~np.eye(n, dtype=bool)).any():
        raise TrainError("batch contains no positive pairs")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise TrainError("zero-norm embedding")
    u = e / norms[:, None]
    sim = u @ u.T
    mined_pos, mined_neg = mine_pairs(sim, labels, hp.epsilon)

    pos_terms = np.where(mined_pos, np.exp(-hp.alpha * (sim - hp.base)), 0.0)
    neg_terms = np.where(mined_neg, np.exp(hp.beta * (sim - hp.base)), 0.0)
    pos_sum = pos_terms.sum(axis=1)
    neg_sum = neg_terms.sum(axis=1)
    per_anchor = np.log1p(pos_sum) / hp.alpha + np.log1p(neg_sum) / hp.beta
    loss = float(per_anchor.mean())

    # dL/dsim for each (anchor, other) pair
    d_sim = (-pos_terms / (1.0 + pos_sum)[:, None] + neg_terms / (1.0 + neg_sum)[:, None]) / n
    d_u = (d_sim + d_sim.T) @ u
    d_e = (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / norms[:, None]
    return loss, d_e


# ---------------------------------------------------------------------------
# schedule and optimizer


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    classes_per_batch: int = 8
    samples_per_class: int = 8
    lr_initial: float = 1e-4
    lr_peak: float = 1e-2
    lr_final: float = 1e-7
    peak_epoch: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_batches: int = 4
    loss: MSLossHParams = field(default_factory=MSLossHParams)

    def __post_init__(self):
        if self.classes_per_batch * self.samples_per_class != self.batch_size:
            raise TrainError("classes_per_batch * samples_per_class must equal batch_size")
        if not (0 < self.lr_initial <= self.lr_peak and 0 < self.lr_final <= self.lr_peak):
            raise TrainError("learning rates must be positive and peak at lr_peak")
        if not 0 < self.peak_epoch < self.epochs:
            raise TrainError("peak_epoch must lie strictly inside (0, epochs)")


def lr_at(step: float, config: TrainConfig, steps_per_epoch: int) -> float:
    """One-cycle learning rate: cosine rise to the peak, then cosine decay."""
    total = config.epochs * steps_per_epoch
    peak = config.peak_epoch * steps_per_epoch
    step = min(max(step, 0), total)
    if step <= peak:
        frac = step / peak
        return config.lr_peak + (config.lr_initial - config.lr_peak) * (1 + math.cos(math.pi * frac)) / 2
    frac = (step - peak) / (total - peak)
    return config.lr_final + (config.lr_peak - config.lr_final) * (1 + math.cos(math.pi * frac)) / 2


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    config: TrainConfig = TrainConfig(),
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update. Returns new arrays and state; inputs are untouched."""
    for name, g in grads.items():
        if name not in params or params[name].shape != g.shape:
            raise TrainError(f"gradient block {name!r} does not match parameters")
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in parameter block {name!r}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.t + 1
    new_state = AdamState({}, {}, t)
    out = dict(params)
    for name, g in grads.items():
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        out[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_state.m[name], new_state.v[name] = m, v
    return out, new_state


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    fold: int
    epoch: int
    step: int
    lr: float
    train_loss: float
    val_loss: float


def group_by_subject(windows: Iterable[VelocityWindow]) -> dict[str, list[VelocityWindow]]:
    groups: dict[str, list[VelocityWindow]] = {}
    for w in windows:
        groups.setdefault(w.source.subject_id, []).append(w)
    return groups


def _batch_loss(params, items, labels, hp, training):
    x = np.stack([w.channels for w in items])
    emb, tape = forward_batch(params, x, training=training)
    loss, d_emb = ms_loss(emb, labels, hp)
    return loss, d_emb, tape


def validation_loss(params: ModelParams, by_class, config: TrainConfig, rng) -> float:
    n_classes = sum(1 for v in by_class.values() if v)
    if n_classes < 2:
        return math.nan
    classes = min(config.classes_per_batch, n_classes)
    losses = []
    for _ in range(config.val_batches):
        items, labels = sample_batch(by_class, rng, classes, config.samples_per_class)
        losses.append(_batch_loss(params, items, labels, config.loss, training=False)[0])
    return float(np.mean(losses))


def train_fold(
    windows: Sequence[VelocityWindow],
    assignment: FoldAssignment,
    fold_index: int,
    net_config: NetConfig,
    config: TrainConfig,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[ModelCheckpoint, list[EpochLog]]:
    """Train one fold model on every fold except ``fold_index``.

    Returns the final-epoch checkpoint and the per-epoch log. Deterministic in
    ``config.seed`` and ``fold_index``.
    """
    if not 0 <= fold_index < assignment.k:
        raise TrainError(f"fold_index {fold_index} outside 0..{assignment.k - 1}")
    by_subject = group_by_subject(windows)
    train_ids = assignment.training_subjects(fold_index)
    val_ids = assignment.subjects_in(fold_index)
    train = {s: by_subject[s] for s in sorted(train_ids) if by_subject.get(s)}
    val = {s: by_subject[s] for s in sorted(val_ids) if by_subject.get(s)}
    n_train = sum(len(v) for v in train.values())
    if n_train == 0:
        raise TrainError(f"fold {fold_index}: empty training set")

    steps_per_epoch = math.ceil(n_train / config.batch_size)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, fold_index, 0]))
    val_seed = np.random.SeedSequence([config.seed, fold_index, 1])
    params = init_model(net_config, int(np.random.SeedSequence([config.seed, fold_index, 2]).generate_state(1)[0]))
    state = AdamState()
    history = []
    step = 0
    for epoch in range(config.epochs):
        losses = []
        for _ in range(steps_per_epoch):
            lr = lr_at(step, config, steps_per_epoch)
            items, labels = sample_batch(train, rng, config.classes_per_batch, config.samples_per_class)
            loss, d_emb, tape = _batch_loss(params, items, labels, config.loss, training=True)
            grads = tape.backward(d_emb)
            arrays, state = adam_step(params.arrays, grads, state, lr, config)
            arrays.update(tape.running)
            params = ModelParams(net_config, arrays)
            losses.append(loss)
            step += 1
        val_loss = validation_loss(params, val, config, np.random.default_rng(val_seed))
        entry = EpochLog(fold_index, epoch + 1, step, lr, float(np.mean(losses)), val_loss)
        history.append(entry)
        log.debug("fold %d epoch %d loss %.5f val %.5f", fold_index, epoch + 1, entry.train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(entry)
    return ModelCheckpoint(net_config, config.seed, params, fold_index), history


LOG_FIELDS = ("fold", "epoch", "step", "lr", "train_loss", "val_loss")


def write_train_log(entries: Iterable[EpochLog], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for e in entries:
            writer.writerow([e.fold, e.epoch, e.step, repr(e.lr), repr(e.train_loss), repr(e.val_loss)])
    return path
