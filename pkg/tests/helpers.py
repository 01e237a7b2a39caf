"""Shared builders for tests: random scores, tiny models and gradient-check cases."""

import math

import numpy as np

from sheetdiff import tensor as T
from sheetdiff.bootleg import BootlegScore
from sheetdiff.model import GptConfig, build_model, classify_batch, classify_full, prepare_context
from sheetdiff.ordinal import ordinal_loss


def random_score(rng, w=None, density=0.1, piece_id=""):
    if w is None:
        w = int(rng.integers(0, 40))
    return BootlegScore((rng.random((w, 62)) < density).astype(np.uint8), piece_id)


def tiny_config(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=2, context_len=16, dropout=0.0)
    base.update(kw)
    return GptConfig(**base)


def _weighted(out, rng):
    """sum(out * R) for a fixed random R, so no gradient is trivially zero."""
    r = T.Tensor(rng.standard_normal(out.shape))
    return (out * r).sum()


def _param(rng, *shape, scale=1.0):
    return T.tensor(rng.standard_normal(shape) * scale)


def grad_cases():
    """name -> builder(rng) returning (loss_fn, points); call inside float64_mode()."""

    def add_bcast(rng):
        a, b = _param(rng, 3, 4), _param(rng, 4)
        R = rng.standard_normal((3, 4))
        return (lambda: (T.add(a, b) * R).sum()), [a, b]

    def mul_bcast(rng):
        a, b = _param(rng, 3, 4), _param(rng, 1, 4)
        R = rng.standard_normal((3, 4))
        return (lambda: (T.mul(a, b) * R).sum()), [a, b]

    def matmul(rng):
        a, b = _param(rng, 5, 7), _param(rng, 7, 3)
        R = rng.standard_normal((5, 3))
        return (lambda: (T.matmul(a, b) * R).sum()), [a, b]

    def matmul_batched(rng):
        a, b = _param(rng, 2, 3, 4, 5), _param(rng, 5, 3)
        R = rng.standard_normal((2, 3, 4, 3))
        return (lambda: (T.matmul(a, b) * R).sum()), [a, b]

    def softmax(rng):
        x = _param(rng, 4, 6)
        R = rng.standard_normal((4, 6))
        return (lambda: (T.softmax_lastdim(x) * R).sum()), [x]

    def layer_norm(rng):
        x, g, b = _param(rng, 3, 8), _param(rng, 8), _param(rng, 8)
        R = rng.standard_normal((3, 8))
        return (lambda: (T.layer_norm(x, g, b) * R).sum()), [x, g, b]

    def gelu(rng):
        x = _param(rng, 4, 5, scale=2.0)
        R = rng.standard_normal((4, 5))
        return (lambda: (T.gelu(x) * R).sum()), [x]

    def sigmoid(rng):
        x = _param(rng, 6, scale=3.0)
        R = rng.standard_normal(6)
        return (lambda: (T.sigmoid(x) * R).sum()), [x]

    def conv1d(rng):
        x, k, b = _param(rng, 6, 3), _param(rng, 3, 3, 4), _param(rng, 4)
        R = rng.standard_normal((6, 4))
        return (lambda: (T.conv1d_causal(x, k, b) * R).sum()), [x, k, b]

    def embedding(rng):
        table = _param(rng, 5, 3)
        ids = rng.integers(0, 5, size=7)
        R = rng.standard_normal((7, 3))
        return (lambda: (T.embedding_lookup(table, ids) * R).sum()), [table]

    def shape_ops(rng):
        x, y = _param(rng, 2, 3, 4), _param(rng, 2, 3, 2)
        R = rng.standard_normal((3, 6))

        def f():
            z = T.concat([x, y], axis=-1)  # 2x3x6
            z = z.transpose(1, 0, 2)[:, 1]  # 3x6
            return (z.reshape(18).reshape(3, 6) * R).mean()

        return f, [x, y]

    def reductions(rng):
        x = _param(rng, 3, 4)
        R = rng.standard_normal(3)
        return (lambda: (x.sum(axis=1) * R).sum() + (x * x).mean()), [x]

    def dropout(rng):
        x = _param(rng, 4, 4)
        R = rng.standard_normal((4, 4))
        return (lambda: (T.dropout(x, 0.3, np.random.default_rng(5)) * R).sum()), [x]

    def cross_entropy(rng):
        x = _param(rng, 3, 4, 6)
        tgt = rng.integers(0, 6, size=(3, 4))
        w = (rng.random((3, 4)) < 0.7).astype(float)
        w[0, 0] = 1.0
        return (lambda: T.cross_entropy(x, tgt, w)), [x]

    def bce(rng):
        x = _param(rng, 3, 5, scale=2.0)
        tgt = (rng.random((3, 5)) < 0.5).astype(float)
        return (lambda: T.bce_with_logits(x, tgt)), [x]

    def classification_loss(rng):
        cfg = tiny_config(encoder_kind=["FC", "CNN", "EMB"][int(rng.integers(0, 3))], cnn_kernel=3)
        model = build_model(cfg, [("a", 4)], seed=int(rng.integers(0, 1000)))
        score = random_score(rng, w=int(rng.integers(1, 6)))
        c = int(rng.integers(0, 4))
        names = ["cls_token", "projection.w", "heads.a.w", "blocks.0.attn.qkv.w", "blocks.1.mlp.fc.w", "wpe"]
        pts = [model.params[n] for n in names]
        return (lambda: ordinal_loss(classify_full(model, score, "a")[0][0], c)), pts

    def cached_classification_loss(rng):
        model = build_model(tiny_config(), [("a", 3)], seed=int(rng.integers(0, 1000)))
        scores = [random_score(rng, w=int(rng.integers(0, 8))) for _ in range(3)]
        ctxs = [prepare_context(model, s) for s in scores]
        labels = rng.integers(0, 3, size=3)
        pts = [model.params[n] for n in model.tail_names()]
        return (lambda: ordinal_loss(classify_batch(model, ctxs, "a")[0], labels)), pts

    return {
        "add": add_bcast,
        "mul": mul_bcast,
        "matmul": matmul,
        "matmul_batched": matmul_batched,
        "softmax_lastdim": softmax,
        "layer_norm": layer_norm,
        "gelu": gelu,
        "sigmoid": sigmoid,
        "conv1d_causal": conv1d,
        "embedding_lookup": embedding,
        "shape_ops": shape_ops,
        "reductions": reductions,
        "dropout": dropout,
        "cross_entropy": cross_entropy,
        "bce_with_logits": bce,
        "classification_loss": classification_loss,
        "cached_classification_loss": cached_classification_loss,
    }


# composed cases have many coordinates; probe a sample of them
MAX_COORDS = {"classification_loss": 12, "cached_classification_loss": 16}


# ---------------------------------------------------------------- brute-force metric oracles


def bf_acc_within(preds, truths, n):
    per_class = {}
    for p, t in zip(preds, truths):
        hit, total = per_class.get(t, (0, 0))
        per_class[t] = (hit + (abs(p - t) <= n), total + 1)
    return math.fsum(h / c for h, c in per_class.values()) / len(per_class)


def bf_macro_mse(preds, truths):
    per_class = {}
    for p, t in zip(preds, truths):
        sq, total = per_class.get(t, (0, 0))
        per_class[t] = (sq + (p - t) ** 2, total + 1)
    return math.fsum(s / c for s, c in per_class.values()) / len(per_class)


def bf_tau_c(scores, classes):
    n = len(scores)
    P = Q = 0
    for i in range(n):
        for j in range(i + 1, n):
            prod = (scores[i] - scores[j]) * (classes[i] - classes[j])
            if prod > 0:
                P += 1
            elif prod < 0:
                Q += 1
    m = len(set(classes))
    return 2 * m * (P - Q) / (n * n * (m - 1))


def bf_air(labels):
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    top = max(counts.values())
    return math.fsum(c / top for c in counts.values()) / len(counts)


def random_metric_instance(rng):
    """(preds, truths, scores) with n <= 50, K <= 9; truths hold at least two classes."""
    k = int(rng.integers(2, 10))
    n = int(rng.integers(2, 51))
    truths = [int(x) for x in rng.integers(0, k, size=n)]
    if len(set(truths)) < 2:
        truths[0] = (truths[1] + 1) % k
    preds = [int(x) for x in rng.integers(0, k, size=n)]
    # coarse grid so ties in scores occur
    scores = [float(x) for x in rng.integers(0, 12, size=n) / 4.0]
    return preds, truths, scores
