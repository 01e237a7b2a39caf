"""Ordinal-classification metrics, Kendall tau-c, imbalance ratio and zero-shot PCA ranking."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import classify_batch, prepare_context
from .ordinal import ordinal_decode_batch
from .tensor import _stable_sigmoid


class UndefinedCorrelationError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


def _check(preds, truths):
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truths.shape}")
    return preds, truths


def _macro(per_class) -> float:
    # correctly rounded sum: the result does not depend on class order
    return math.fsum(per_class) / len(per_class)


def acc_within_n(preds, truths, k: int | None = None, n: int = 0) -> float:
    """Macro accuracy with tolerance n: per-class share of |pred - truth| <= n, averaged over present classes."""
    preds, truths = _check(preds, truths)
    classes = np.unique(truths)
    if classes.size == 0:
        return 0.0
    hits = np.abs(preds - truths) <= n
    return _macro([int(hits[truths == c].sum()) / int((truths == c).sum()) for c in classes])


def macro_mse(preds, truths, k: int | None = None) -> float:
    preds, truths = _check(preds, truths)
    classes = np.unique(truths)
    if classes.size == 0:
        return 0.0
    sq = (preds - truths) ** 2
    return _macro([int(sq[truths == c].sum()) / int((truths == c).sum()) for c in classes])


def kendall_tau_c(scores, classes) -> float:
    """Stuart's tau-c = 2m(P - Q) / (n^2 (m - 1)), m = number of distinct classes present."""
    x = np.asarray(scores, dtype=np.float64)
    y = np.asarray(classes)
    if x.shape != y.shape:
        raise ValueError("scores and classes differ in length")
    n = x.size
    if n < 2:
        raise UndefinedCorrelationError("tau-c needs at least two items")
    m = np.unique(y).size
    if m < 2:
        raise UndefinedCorrelationError("tau-c is undefined with fewer than two classes")
    s = 0
    # row-block sweep keeps memory at O(block * n)
    block = max(1, 4_000_000 // max(n, 1))
    for start in range(0, n, block):
        xs = np.sign(x[start : start + block, None] - x[None, :])
        ys = np.sign(y[start : start + block, None] - y[None, :])
        s += int((xs * ys).sum())
    # every unordered pair was counted twice
    pq = s / 2
    return float(2.0 * m * pq / (n * n * (m - 1)))


def air(labels, k: int | None = None) -> float:
    """Average imbalance ratio: mean over present classes of count / majority count."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("AIR of an empty label set")
    _, counts = np.unique(labels, return_counts=True)
    top = int(counts.max())
    return _macro([int(c) / top for c in counts])


def pca_first_component(embeddings, tol: float = 1e-9, max_iter: int = 1000):
    """Scores along the first principal direction, found by power iteration.

    Rows are mean-centred; iteration starts from the largest-norm centred row.
    The unit component is signed so its largest-magnitude entry is positive.
    Returns ``(scores, component)``.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise DegenerateDataError("PCA needs an n x d matrix with n >= 2")
    Xc = X - X.mean(axis=0)
    norms = np.linalg.norm(Xc, axis=1)
    if norms.max() <= 1e-12 * max(1.0, np.abs(X).max()):
        raise DegenerateDataError("embeddings have zero variance")
    v = Xc[int(np.argmax(norms))] / norms.max()
    for _ in range(max_iter):
        w = Xc.T @ (Xc @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            raise DegenerateDataError("power iteration collapsed")
        w /= nw
        if np.dot(w, v) < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return Xc @ v, v


def aggregate(values) -> dict:
    """Mean and population standard deviation across folds."""
    arr = np.asarray(values, dtype=np.float64)
    return {"values": [float(x) for x in arr], "mean": float(arr.mean()), "std": float(arr.std())}


def classification_metrics(preds, truths, k) -> dict:
    return {
        "acc0": acc_within_n(preds, truths, k, 0),
        "acc1": acc_within_n(preds, truths, k, 1),
        "mse": macro_mse(preds, truths, k),
    }


# ---------------------------------------------------------------- model-facing


def predict_dataset(model, scores, dataset_id, batch_size=64):
    """Decoded classes ``[n]`` and embeddings ``[n, d]`` for a list of scores."""
    preds, embs = [], []
    for start in range(0, len(scores), batch_size):
        ctxs = [prepare_context(model, s) for s in scores[start : start + batch_size]]
        logits, emb = classify_batch(model, ctxs, dataset_id)
        preds.append(ordinal_decode_batch(_stable_sigmoid(logits.data)))
        embs.append(emb.data)
    if not preds:
        return np.zeros(0, dtype=np.int64), np.zeros((0, model.config.d_model))
    return np.concatenate(preds), np.concatenate(embs)


def evaluate_model(model, scores, labels, dataset_id, k=None) -> dict:
    """acc0 / acc1 / mse of the model's decoded predictions, plus the predictions."""
    k = model.head_k(dataset_id) if k is None else k
    preds, _ = predict_dataset(model, scores, dataset_id)
    out = classification_metrics(preds, labels, k)
    out["predictions"] = [int(p) for p in preds]
    return out


def orient_scores(scores, reference):
    """Flip ``scores`` if they correlate negatively with ``reference``."""
    s = np.asarray(scores, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    sc, rc = s - s.mean(), r - r.mean()
    return -s if float(sc @ rc) < 0 else s


def zero_shot_rank(model, scores, labels, head_dataset_id) -> dict:
    """Rank unseen pieces by the first principal component of their embeddings.

    The component's sign follows the model's own predictions from
    ``head_dataset_id`` (falling back to its summed threshold probabilities
    when those are constant); ground-truth labels are only used for tau-c.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise UndefinedCorrelationError("zero-shot ranking needs at least two classes")
    probs, embs = [], []
    for start in range(0, len(scores), 64):
        ctxs = [prepare_context(model, s) for s in scores[start : start + 64]]
        logits, emb = classify_batch(model, ctxs, head_dataset_id)
        probs.append(_stable_sigmoid(logits.data.astype(np.float64)))
        embs.append(emb.data)
    probs = np.concatenate(probs)
    embs = np.concatenate(embs)
    ranks, _ = pca_first_component(embs)
    own = (probs > 0.5).sum(axis=1)
    if np.ptp(own) == 0:
        own = probs.sum(axis=1)
    ranks = orient_scores(ranks, own)
    return {"tau_c": kendall_tau_c(ranks, labels), "scores": [float(x) for x in ranks]}


@dataclass
class EvalReport:
    """Per-dataset fold metrics for one model configuration."""

    model_name: str
    datasets: dict = field(default_factory=dict)  # name -> {"acc0": [...], "acc1": [...], "mse": [...], "tau_c": [...]}
    air: dict = field(default_factory=dict)
    predictions: dict = field(default_factory=dict)

    def add_fold(self, dataset, metrics: dict):
        slot = self.datasets.setdefault(dataset, {})
        for key in ("acc0", "acc1", "mse", "tau_c"):
            if key in metrics:
                slot.setdefault(key, []).append(float(metrics[key]))

    def summary(self) -> dict:
        return {
            ds: {key: aggregate(vals) for key, vals in metrics.items()} for ds, metrics in self.datasets.items()
        }

    def to_json(self) -> str:
        return json.dumps(
            {
                "model": self.model_name,
                "metrics": self.summary(),
                "air": self.air,
                "predictions": self.predictions,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        rep = cls(obj["model"], air=obj.get("air", {}), predictions=obj.get("predictions", {}))
        for ds, metrics in obj["metrics"].items():
            rep.datasets[ds] = {k: list(v["values"]) for k, v in metrics.items()}
        return rep
