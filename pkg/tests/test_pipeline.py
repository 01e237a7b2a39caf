import json
import math
from collections import Counter

import numpy as np
import pytest

from sheetdiff.bootleg import BootlegScore
from sheetdiff.dataset import SynthParams, load_scores, synth_generate
from sheetdiff.evalrank import classification_metrics, predict_dataset
from sheetdiff.model import ContractError, build_model, score_sequence
from sheetdiff.pipeline import (
    EarlyStopState,
    FinetuneSettings,
    PretrainSettings,
    TaskData,
    balanced_batches,
    early_stop_update,
    finetune,
    make_cv_splits,
    make_windows,
    pretrain,
    write_history,
)
from helpers import random_score, tiny_config


# ---------------------------------------------------------------- splits


def test_splits_divisible_case():
    ids = [f"p{i}" for i in range(100)]
    labels = [i % 5 for i in range(100)]
    folds = make_cv_splits(ids, labels, seed=0)
    assert len(folds) == 5
    for f in folds:
        assert (len(f.train), len(f.validation), len(f.test)) == (60, 20, 20)
        assert not set(f.train) & set(f.validation)
        assert not set(f.train) & set(f.test)
        assert not set(f.validation) & set(f.test)
        # stratified: four of each class in the test stratum
        lab = dict(zip(ids, labels))
        assert Counter(lab[p] for p in f.test) == {c: 4 for c in range(5)}
    tests = [p for f in folds for p in f.test]
    assert sorted(tests) == sorted(ids) and len(tests) == len(set(tests))
    assert [f.to_json() for f in folds] == [f.to_json() for f in make_cv_splits(ids, labels, seed=0)]
    assert [f.test for f in folds] != [f.test for f in make_cv_splits(ids, labels, seed=1)]


def test_split_rotation_and_uneven_classes():
    rng = np.random.default_rng(0)
    ids = [f"p{i}" for i in range(73)]
    labels = list(rng.integers(0, 4, size=73))
    folds = make_cv_splits(ids, labels, seed=3)
    for i, f in enumerate(folds):
        assert f.validation == folds[(i + 1) % 5].test
        assert sorted(f.train + f.validation + f.test) == sorted(ids)
    sizes = [len(f.test) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    lab = dict(zip(ids, labels))
    for c in range(4):
        per_fold = [sum(lab[p] == c for p in f.test) for f in folds]
        assert max(per_fold) - min(per_fold) <= 1


def test_split_errors_and_warnings():
    with pytest.raises(ContractError):
        make_cv_splits(["a", "b", "c"], [0, 1, 0], seed=0)
    with pytest.raises(ValueError):
        make_cv_splits(["a"] * 5, [0] * 5, seed=0)
    with pytest.warns(UserWarning):
        make_cv_splits([f"p{i}" for i in range(10)], [0, 1] * 5, seed=0, num_classes=3)


# ---------------------------------------------------------------- sampling


def test_balanced_sampler_frequencies():
    labels = np.array([0] * 90 + [1] * 10)
    rng = np.random.default_rng(0)
    draws = np.concatenate([b for _ in range(10) for b in balanced_batches(labels, 16, rng)])
    assert draws.size == 1000
    assert abs(np.mean(labels[draws] == 1) - 0.5) <= 0.05
    nat = np.concatenate([b for _ in range(10) for b in balanced_batches(labels, 16, rng, "natural")])
    assert abs(np.mean(labels[nat] == 0) - 0.9) <= 0.03
    single = np.concatenate(balanced_batches(np.full(20, 2), 3, rng))
    assert np.all(single < 20)


def test_sampler_epoch_shape():
    rng = np.random.default_rng(1)
    batches = balanced_batches(np.arange(10) % 2, 4, rng)
    assert [len(b) for b in batches] == [4, 4, 2]
    with pytest.raises(ValueError):
        balanced_batches([], 4, rng)
    with pytest.raises(ValueError):
        balanced_batches([0], 0, rng)
    with pytest.raises(ValueError):
        balanced_batches([0], 1, rng, "weird")


# ---------------------------------------------------------------- pretraining


def test_windows_stay_inside_pieces():
    rng = np.random.default_rng(2)
    m = build_model(tiny_config(context_len=8))
    scores = [random_score(rng, w=w) for w in (1, 5, 8, 9, 17)]
    wins = make_windows(m, scores)
    # per piece: ceil(w / 8) windows, minus a trailing window of length 1
    expected = sum(math.ceil(w / 8) - (w % 8 == 1) for w in (1, 5, 8, 9, 17))
    assert len(wins) == expected
    seqs = [score_sequence(m, s) for s in scores]
    for win in wins:
        assert any(
            np.array_equal(win, seq[a : a + len(win)]) for seq in seqs for a in range(0, len(seq), 8)
        )


def test_pretrain_memorizes_one_window_and_is_deterministic():
    rng = np.random.default_rng(3)
    score = random_score(rng, w=16, density=0.1)
    settings = PretrainSettings(steps=200, batch_size=1, learning_rate=1e-2)

    def run():
        m = build_model(tiny_config(dropout=0.0), seed=0)
        return pretrain(m, [score], settings, seed=0), m

    curve, m = run()
    assert abs(curve[0] - math.log(2)) <= 1e-3
    assert curve[-1] < 0.1 * curve[0]
    curve2, m2 = run()
    assert curve == curve2
    assert all(m.params[n].data.tobytes() == m2.params[n].data.tobytes() for n in m.params)
    with pytest.raises(ValueError):
        pretrain(build_model(tiny_config()), [BootlegScore(np.zeros((1, 62)))], settings)


def test_pretrain_leaves_tail_alone():
    rng = np.random.default_rng(4)
    m = build_model(tiny_config(), [("a", 3)])
    before = {n: m.params[n].data.copy() for n in m.tail_names()}
    pretrain(m, [random_score(rng, w=12)], PretrainSettings(steps=3, batch_size=1), seed=0)
    for n, arr in before.items():
        assert m.params[n].data.tobytes() == arr.tobytes()


# ---------------------------------------------------------------- early stopping


def test_early_stopping_rules():
    st = EarlyStopState(patience=10)
    for e in range(30):
        decision, best = early_stop_update(st, 0.1 + 0.01 * e, 1.0, e)
        assert decision == "continue" and best == e
    st = EarlyStopState(patience=10)
    decisions = [early_stop_update(st, 0.5, 1.0, e)[0] for e in range(11)]
    assert decisions.index("stop") == 10 and st.best_epoch == 0
    st = EarlyStopState(patience=10)
    st.update(0.5, 1.0, 0)
    _, improved = st.update(0.5, 0.9, 1)
    assert improved and st.best_epoch == 1
    _, improved = st.update(0.5, 0.9, 2)
    assert not improved
    with pytest.raises(ValueError):
        st.update(float("nan"), 0.0, 3)


# ---------------------------------------------------------------- fine-tuning


@pytest.fixture(scope="module")
def synth_tasks(tmp_path_factory):
    out = {}
    for name, k, seed in (("a", 3, 0), ("b", 4, 1)):
        params = SynthParams(n_pieces=60, num_classes=k, seed=seed, w_min=8, w_max=24, density_gain=3, name=name)
        man = synth_generate(params, tmp_path_factory.mktemp(name))
        scores = load_scores(man)
        ids = [p.piece_id for p in man.pieces]
        labels = man.labels
        out[name] = TaskData(name, k, [scores[i] for i in ids[:40]], labels[:40], [scores[i] for i in ids[40:]], labels[40:])
    return out


def _model(heads=(("a", 3), ("b", 4))):
    return build_model(tiny_config(context_len=32), list(heads), seed=1)


def test_finetune_fits_separable_data(synth_tasks):
    task = synth_tasks["a"]
    train_only = TaskData("a", 3, task.train_scores, task.train_labels)
    # a short pretraining run gives the frozen body features worth reading
    m = build_model(tiny_config(d_model=32, context_len=32), [("a", 3)], seed=1)
    pretrain(m, train_only.train_scores, PretrainSettings(steps=150, batch_size=8, learning_rate=3e-3), seed=0)
    settings = FinetuneSettings(learning_rate=1e-2, batch_size=8, max_epochs=50)
    m, hist = finetune(m, [train_only], settings, seed=0, mode="single")
    preds = predict_dataset(m, train_only.train_scores, "a")[0]
    assert classification_metrics(preds, train_only.train_labels, 3)["acc0"] >= 0.9
    assert [r["epoch"] for r in hist if r["split"] == "train"] == list(range(50))


def test_finetune_single_equals_degenerate_multi_and_freezes_body(synth_tasks):
    settings = FinetuneSettings(learning_rate=1e-2, batch_size=8, max_epochs=6, patience=3)
    base = _model([("a", 3)])
    m1, h1 = finetune(base.copy(), [synth_tasks["a"]], settings, seed=5, mode="single")
    m2, h2 = finetune(base.copy(), [synth_tasks["a"]], settings, seed=5, mode="multi")
    assert h1 == h2
    for n in base.params:
        assert m1.params[n].data.tobytes() == m2.params[n].data.tobytes()
    for n in base.body_names():
        assert m1.params[n].data.tobytes() == base.params[n].data.tobytes()
    assert any(m1.params[n].data.tobytes() != base.params[n].data.tobytes() for n in base.tail_names())


def test_finetune_multitask_head_isolation(synth_tasks):
    seen = []

    def on_step(epoch, dataset, grads):
        other = "b" if dataset == "a" else "a"
        seen.append((dataset, all(np.all(grads[f"heads.{other}.{p}"] == 0) for p in "wb")))

    settings = FinetuneSettings(learning_rate=1e-2, batch_size=16, max_epochs=1)
    finetune(_model(), [synth_tasks["a"], synth_tasks["b"]], settings, seed=0, on_step=on_step)
    # 40 training pieces per task at batch 16: three round-robin cycles
    assert [d for d, _ in seen] == ["a", "b"] * 3
    assert all(ok for _, ok in seen)


def test_finetune_restores_best_epoch(synth_tasks):
    task = synth_tasks["b"]
    settings = FinetuneSettings(learning_rate=3e-2, batch_size=8, max_epochs=15, patience=4)
    m, hist = finetune(_model([("b", 4)]), [task], settings, seed=2, mode="single")
    best_epoch = hist[-1]["epoch"]
    best = [r for r in hist if r["split"] == "validation" and r["epoch"] == best_epoch][0]
    preds = predict_dataset(m, task.val_scores, "b")[0]
    got = classification_metrics(preds, task.val_labels, 4)
    assert got["acc0"] == best["acc0"] and got["mse"] == best["mse"]


def test_finetune_contract_errors(synth_tasks):
    with pytest.raises(ContractError):
        finetune(_model([("a", 3)]), [synth_tasks["b"]], FinetuneSettings(max_epochs=1))
    with pytest.raises(ValueError):
        finetune(_model(), [synth_tasks["a"], synth_tasks["b"]], FinetuneSettings(max_epochs=1), mode="single")


def test_write_history(tmp_path):
    path = tmp_path / "h.jsonl"
    recs = [{"epoch": 0, "split": "train", "loss": 0.5}, {"epoch": 0, "split": "best"}]
    write_history(recs, path)
    assert [json.loads(line) for line in path.read_text().splitlines()] == recs
