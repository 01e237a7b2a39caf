"""Pretraining, fine-tuning, sampling, early stopping and cross-validation splits."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .bootleg import BootlegScore, read_bsc
from .evalrank import classification_metrics
from .model import (
    ContractError,
    GptModel,
    classify_batch,
    forward_lm,
    prepare_context,
    score_sequence,
)
from .ordinal import ordinal_decode_batch, ordinal_loss

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- splits


@dataclass(frozen=True)
class CvSplit:
    fold_index: int
    train: list
    validation: list
    test: list

    def to_json(self) -> dict:
        return asdict(self)


def make_cv_splits(piece_ids, labels, seed: int, n_folds: int = 5, num_classes: int | None = None):
    """Stratified folds: fold i tests on stratum i, validates on stratum i+1, trains on the rest.

    Each class's pieces are shuffled and dealt round-robin over the strata;
    the dealing position carries over between classes so stratum sizes stay
    within one of each other.
    """
    piece_ids = list(piece_ids)
    labels = list(labels)
    if len(piece_ids) != len(labels):
        raise ValueError("piece_ids and labels differ in length")
    if len(set(piece_ids)) != len(piece_ids):
        raise ValueError("duplicate piece ids")
    if len(piece_ids) < n_folds:
        raise ContractError(f"need at least {n_folds} pieces for {n_folds}-fold splits, got {len(piece_ids)}")
    if num_classes is not None:
        empty = sorted(set(range(num_classes)) - set(labels))
        if empty:
            warnings.warn(f"classes without pieces are skipped from stratification: {empty}")
    rng = np.random.default_rng(seed)
    strata = [[] for _ in range(n_folds)]
    slot = 0
    for c in sorted(set(labels)):
        members = [pid for pid, lab in zip(piece_ids, labels) if lab == c]
        for j in rng.permutation(len(members)):
            strata[slot % n_folds].append(members[j])
            slot += 1
    folds = []
    for i in range(n_folds):
        val_i = (i + 1) % n_folds
        train = [pid for j, s in enumerate(strata) if j not in (i, val_i) for pid in s]
        folds.append(CvSplit(i, train, list(strata[val_i]), list(strata[i])))
    return folds


def splits_for_manifest(manifest, seed: int, n_folds: int = 5):
    return make_cv_splits(
        [p.piece_id for p in manifest.pieces], manifest.labels, seed, n_folds, manifest.num_classes
    )


# ---------------------------------------------------------------- sampling


def balanced_batches(labels, batch_size: int, rng, mode: str = "balanced"):
    """One epoch of index batches, ``ceil(N / batch_size)`` of them (last may be short).

    ``balanced`` draws a class uniformly, then a piece uniformly within it (with
    replacement). ``natural`` walks a fresh permutation, so label frequencies
    are exactly the empirical ones.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n == 0:
        raise ValueError("cannot sample from an empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_batches = math.ceil(n / batch_size)
    if mode == "natural":
        order = rng.permutation(n)
        return [order[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]
    if mode != "balanced":
        raise ValueError(f"unknown sampler mode {mode!r}")
    classes = np.unique(labels)
    members = [np.flatnonzero(labels == c) for c in classes]
    picks_c = rng.integers(0, len(classes), size=n)
    draws = np.empty(n, dtype=np.int64)
    for i, ci in enumerate(picks_c):
        pool = members[ci]
        draws[i] = pool[rng.integers(0, len(pool))]
    return [draws[i * batch_size : (i + 1) * batch_size] for i in range(n_batches)]


# ---------------------------------------------------------------- pretraining


def load_corpus(path) -> list[BootlegScore]:
    """All ``.bsc`` files under a directory (sorted by name), or one file."""
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.rglob("*.bsc"))
    return [read_bsc(f) for f in files]


def make_windows(model: GptModel, scores, context_len: int | None = None):
    """Non-overlapping windows per piece; never spans two pieces; drops windows shorter than 2."""
    c = context_len or model.config.context_len
    out = []
    for s in scores:
        seq = score_sequence(model, s)
        for start in range(0, len(seq), c):
            win = seq[start : start + c]
            if len(win) >= 2:
                out.append(win)
    return out


@dataclass
class PretrainSettings:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    clip_norm: float = 1.0


def pretrain(model: GptModel, scores, settings: PretrainSettings, seed: int = 0):
    """Next-step pretraining on windows of the corpus; returns the per-step loss curve."""
    windows = make_windows(model, scores)
    if not windows:
        raise ValueError("empty pretraining corpus")
    body = model.body_names()
    model.set_trainable(body)
    params = {n: model.params[n] for n in body}
    state = T.AdamState(settings.learning_rate, weight_decay=settings.weight_decay)
    shuffle_rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng([seed, 1])
    curve = []
    order, cursor = [], 0
    for step in range(settings.steps):
        if cursor >= len(order):
            order = list(shuffle_rng.permutation(len(windows)))
            cursor = 0
        idx = order[cursor : cursor + settings.batch_size]
        cursor += settings.batch_size
        loss = forward_lm(model, [windows[i] for i in idx], drop_rng)
        grads = _collect(loss, params)
        grads, _ = T.clip_gradients(grads, settings.clip_norm)
        T.adam_step(params, grads, state)
        curve.append(float(loss.data))
        if step % 100 == 0:
            log.info("pretrain step %d loss %.5f", step, curve[-1])
    model.set_trainable(())
    return curve


def _collect(loss, params: dict) -> dict:
    for p in params.values():
        p.grad = None
    T.backward(loss)
    grads = {}
    for name, p in params.items():
        if p.grad is not None:
            grads[name] = p.grad
            p.grad = None
    return grads


# ---------------------------------------------------------------- fine-tuning


@dataclass
class EarlyStopState:
    patience: int = 10
    best_acc0: float = -math.inf
    best_mse: float = math.inf
    best_epoch: int = -1
    epochs_without_improvement: int = 0

    def update(self, acc0: float, mse: float, epoch: int):
        """Record one validation result; returns ``(decision, improved)``.

        Improvement means strictly higher Acc0, or equal Acc0 with strictly
        lower MSE. ``decision`` is ``"stop"`` once ``patience`` epochs in a
        row brought no improvement.
        """
        if not (math.isfinite(acc0) and math.isfinite(mse)):
            raise ValueError("validation metrics must be finite")
        improved = acc0 > self.best_acc0 or (acc0 == self.best_acc0 and mse < self.best_mse)
        if improved:
            self.best_acc0, self.best_mse, self.best_epoch = acc0, mse, epoch
            self.epochs_without_improvement = 0
        else:
            self.epochs_without_improvement += 1
        decision = "stop" if self.epochs_without_improvement >= self.patience else "continue"
        return decision, improved


def early_stop_update(state: EarlyStopState, val_acc0, val_mse, epoch):
    decision, _ = state.update(val_acc0, val_mse, epoch)
    return decision, state.best_epoch


@dataclass
class TaskData:
    """One dataset's fine-tuning material: scores and labels per split."""

    name: str
    num_classes: int
    train_scores: list
    train_labels: list
    val_scores: list = field(default_factory=list)
    val_labels: list = field(default_factory=list)


@dataclass
class FinetuneSettings:
    learning_rate: float = 1e-5
    batch_size: int = 64
    clip_norm: float = 1e-4
    weight_decay: float = 1e-4
    max_epochs: int = 200
    patience: int = 10
    sampler: str = "balanced"


def _predict_contexts(model, contexts, dataset_id, batch_size=256):
    preds = []
    for start in range(0, len(contexts), batch_size):
        logits, _ = classify_batch(model, contexts[start : start + batch_size], dataset_id)
        preds.append(ordinal_decode_batch(T._stable_sigmoid(logits.data)))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _val_loss(model, contexts, labels, dataset_id, batch_size=256):
    total, n = 0.0, 0
    for start in range(0, len(contexts), batch_size):
        logits, _ = classify_batch(model, contexts[start : start + batch_size], dataset_id)
        lab = labels[start : start + batch_size]
        total += float(ordinal_loss(logits, lab).data) * len(lab)
        n += len(lab)
    return total / max(n, 1)


def finetune(
    model: GptModel,
    tasks,
    settings: FinetuneSettings | None = None,
    seed: int = 0,
    mode: str = "multi",
    on_step=None,
):
    """Train the classification tail on one or more datasets.

    Only the classification token, projection layer and heads move; the body
    stays frozen (and runs without dropout, so per-piece keys/values are
    computed once). Datasets are interleaved round-robin, one batch each per
    cycle, each batch's loss flowing through its own head only. Early stopping
    watches the macro average of validation Acc0 / MSE over the datasets and
    the best epoch's tail is restored at the end.

    ``on_step(epoch, dataset, grads)`` is called after every backward pass
    with the raw loss gradient of every tail parameter (zeros for parameters
    the batch's loss does not reach), before regularization and clipping.

    Returns ``(model, history)`` where history is a list of JSON-able records.
    """
    settings = settings or FinetuneSettings()
    tasks = list(tasks)
    if mode not in ("single", "multi"):
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    if mode == "single" and len(tasks) != 1:
        raise ValueError("single mode trains exactly one dataset")
    for task in tasks:
        model.head_k(task.name)

    shared = model.shared_tail_names()
    model.set_trainable(model.tail_names())
    # L2 enters the gradient before clipping, so Adam itself runs without decay
    shared_state = T.AdamState(settings.learning_rate)
    head_states = {t.name: T.AdamState(settings.learning_rate) for t in tasks}

    train_ctx = [[prepare_context(model, s) for s in t.train_scores] for t in tasks]
    val_ctx = [[prepare_context(model, s) for s in t.val_scores] for t in tasks]
    train_lab = [np.asarray(t.train_labels, dtype=np.int64) for t in tasks]
    val_lab = [np.asarray(t.val_labels, dtype=np.int64) for t in tasks]
    streams = [np.random.default_rng([seed, i]) for i in range(len(tasks))]
    pending: list[list] = [[] for _ in tasks]

    def next_batch(i):
        if not pending[i]:
            pending[i] = list(balanced_batches(train_lab[i], settings.batch_size, streams[i], settings.sampler))
        return pending[i].pop(0)

    n_cycles = max(math.ceil(len(l) / settings.batch_size) for l in train_lab)
    stopper = EarlyStopState(settings.patience)
    best = {n: model.params[n].data.copy() for n in model.tail_names()}
    history = []
    has_val = all(len(v) for v in val_lab)

    for epoch in range(settings.max_epochs):
        cycle_sums = []
        for _ in range(n_cycles):
            cycle = 0.0
            for i, task in enumerate(tasks):
                idx = next_batch(i)
                ctxs = [train_ctx[i][j] for j in idx]
                logits, _ = classify_batch(model, ctxs, task.name)
                loss = ordinal_loss(logits, train_lab[i][idx])
                tail = {n: model.params[n] for n in model.tail_names()}
                raw = _collect(loss, tail)
                if on_step is not None:
                    on_step(epoch, task.name, {n: raw.get(n, np.zeros_like(p.data)) for n, p in tail.items()})
                names = shared + model.head_names(task.name)
                params = {n: model.params[n] for n in names}
                grads = {n: raw[n] for n in names if n in raw}
                if settings.weight_decay:
                    grads = {n: g + settings.weight_decay * params[n].data for n, g in grads.items()}
                grads, _ = T.clip_gradients(grads, settings.clip_norm)
                T.adam_step({n: params[n] for n in shared}, {n: grads[n] for n in shared if n in grads}, shared_state)
                head = model.head_names(task.name)
                T.adam_step({n: params[n] for n in head}, {n: grads[n] for n in head if n in grads}, head_states[task.name])
                cycle += float(loss.data)
            cycle_sums.append(cycle)
        history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(cycle_sums))})

        if not has_val:
            best = {n: model.params[n].data.copy() for n in model.tail_names()}
            continue
        accs, mses = [], []
        for i, task in enumerate(tasks):
            preds = _predict_contexts(model, val_ctx[i], task.name)
            m = classification_metrics(preds, val_lab[i], task.num_classes)
            vloss = _val_loss(model, val_ctx[i], val_lab[i], task.name)
            history.append({"epoch": epoch, "split": "validation", "dataset": task.name, "loss": vloss, **m})
            accs.append(m["acc0"])
            mses.append(m["mse"])
        decision, improved = stopper.update(float(np.mean(accs)), float(np.mean(mses)), epoch)
        if improved:
            best = {n: model.params[n].data.copy() for n in model.tail_names()}
        if decision == "stop":
            log.info("early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    for n, arr in best.items():
        model.params[n].data = arr
    model.set_trainable(())
    history.append({"epoch": stopper.best_epoch, "split": "best"})
    return model, history


def write_history(history, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
