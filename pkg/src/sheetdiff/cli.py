"""Command-line entry point: ``sheetdiff {synth,stats,pretrain,finetune,evaluate,rank}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bootleg import BootlegError, corpus_stats
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import ManifestError, SynthParams, load_manifest, load_scores, synth_generate, validate_dataset
from .evalrank import (
    DegenerateDataError,
    EvalReport,
    UndefinedCorrelationError,
    air,
    evaluate_model,
    classification_metrics,
    zero_shot_rank,
)
from .model import ContractError, GptConfig, build_model
from .pipeline import (
    FinetuneSettings,
    PretrainSettings,
    TaskData,
    finetune,
    load_corpus,
    pretrain,
    splits_for_manifest,
    write_history,
)

log = logging.getLogger("sheetdiff")

OUT_ENV = "SHEETDIFF_OUT"
DATA_ERRORS = (
    BootlegError,
    CheckpointError,
    ManifestError,
    ContractError,
    UndefinedCorrelationError,
    DegenerateDataError,
    KeyError,
    OSError,
    ValueError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- tables


def fmt_pct(x: float) -> str:
    return f"{100.0 * x:.1f}"


def fmt_num(x: float) -> str:
    return f"{x:.1f}"


def render_tables(reports) -> str:
    """Plain-text Acc0 / Acc1 / MSE table, "mean(std)" cells, best per dataset and column starred."""
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to render")
    datasets = []
    for rep in reports:
        for ds in rep.datasets:
            if ds not in datasets:
                datasets.append(ds)
    cols = [("acc0", "Acc0 (%)", fmt_pct, max), ("acc1", "Acc1 (%)", fmt_pct, max), ("mse", "MSE", fmt_num, min)]
    width = max(12, *(len(r.model_name) + 2 for r in reports))
    lines = [f"{'Model':<{width}}" + "".join(f"{title:>14}" for _, title, _, _ in cols)]
    lines.append("-" * len(lines[0]))
    for ds in datasets:
        lines.append(ds)
        rows = [(r, r.summary()[ds]) for r in reports if ds in r.datasets]
        best = {}
        for key, _, _, pick in cols:
            vals = [s[key]["mean"] for _, s in rows if key in s]
            if vals:
                best[key] = pick(vals)
        for rep, summ in rows:
            cells = []
            for key, _, fmt, _ in cols:
                if key not in summ:
                    cells.append(f"{'-':>14}")
                    continue
                m, sd = summ[key]["mean"], summ[key]["std"]
                mark = "*" if m == best[key] else " "
                cells.append(f"{fmt(m) + '(' + fmt(sd) + ')' + mark:>14}")
            lines.append(f"  {rep.model_name:<{width - 2}}" + "".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- commands


def _write_run(out: Path, args, argv):
    out.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    record = {"command": args.command, "argv": list(argv), "resolved": resolved, "version": __version__,
              "created": time.strftime("%Y-%m-%dT%H:%M:%S")}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


def cmd_synth(args, argv):
    out = _out_dir(args)
    params = SynthParams(
        n_pieces=args.pieces, num_classes=args.classes, seed=args.seed, w_min=args.w_min, w_max=args.w_max,
        density_gain=args.density_gain, range_gain=args.range_gain, polyphony_gain=args.polyphony_gain,
        label_noise=args.label_noise, name=args.name,
    )
    manifest = synth_generate(params, out)
    _write_run(out, args, argv)
    print(f"wrote {len(manifest.pieces)} pieces and {out / 'manifest.json'}")


def cmd_stats(args, argv):
    manifest = load_manifest(args.manifest, check_files=False)
    report = validate_dataset(manifest)
    readable = []
    for p in manifest.pieces:
        try:
            readable.append(manifest.load_score(p))
        except (OSError, BootlegError):
            pass
    report["corpus"] = corpus_stats(readable)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_pretrain(args, argv):
    out = _out_dir(args)
    preset = GptConfig.paper if args.preset == "paper" else GptConfig.desk
    overrides = {"encoder_kind": args.encoder.upper()}
    if args.context_len:
        overrides["context_len"] = args.context_len
    config = preset(**overrides)
    scores = load_corpus(args.corpus)
    if not scores:
        raise ContractError(f"no .bsc files under {args.corpus}")
    model = build_model(config, seed=args.seed)
    settings = PretrainSettings(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr)
    curve = pretrain(model, scores, settings, seed=args.seed)
    _write_run(out, args, argv)
    save_checkpoint(model, out / "model.ckpt")
    (out / "loss_curve.json").write_text(json.dumps(curve) + "\n")
    print(f"pretrained {config.encoder_kind} model: loss {curve[0]:.4f} -> {curve[-1]:.4f}")


def _tasks_for_fold(manifests, scores, splits, fold):
    tasks = []
    for man in manifests:
        split = splits[man.name][fold]
        lab = {p.piece_id: p.label for p in man.pieces}
        sc = scores[man.name]
        tasks.append(TaskData(
            man.name, man.num_classes,
            [sc[i] for i in split.train], [lab[i] for i in split.train],
            [sc[i] for i in split.validation], [lab[i] for i in split.validation],
        ))
    return tasks


def run_protocol(checkpoint, manifests, multitask, settings, folds, seed, out: Path, encoder=None):
    """Cross-validated fine-tuning + test evaluation; returns the list of reports."""
    pretrained = load_checkpoint(checkpoint, expect_encoder=encoder)
    scores = {m.name: load_scores(m) for m in manifests}
    splits = {m.name: splits_for_manifest(m, seed, folds) for m in manifests}
    groups = [manifests] if multitask else [[m] for m in manifests]
    reports = []
    enc = pretrained.config.encoder_kind
    for group in groups:
        name = f"GPT_{enc}_" + ("multi" if multitask else group[0].name)
        rep = EvalReport(name)
        for m in group:
            rep.air[m.name] = air(m.labels)
        for fold in range(folds):
            fold_dir = out / name / f"fold{fold}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            model = pretrained.copy()
            rng = np.random.default_rng([seed, fold])
            for m in group:
                model.add_head(m.name, m.num_classes, rng)
                (fold_dir / f"split_{m.name}.json").write_text(
                    json.dumps(splits[m.name][fold].to_json(), indent=2) + "\n")
            tasks = _tasks_for_fold(group, scores, splits, fold)
            model, history = finetune(model, tasks, settings, seed=seed + fold,
                                      mode="multi" if multitask else "single")
            write_history(history, fold_dir / "history.jsonl")
            save_checkpoint(model, fold_dir / "model.ckpt")
            for m in group:
                test = splits[m.name][fold].test
                lab = {p.piece_id: p.label for p in m.pieces}
                res = evaluate_model(model, [scores[m.name][i] for i in test], [lab[i] for i in test], m.name)
                rep.add_fold(m.name, res)
                rep.predictions.setdefault(m.name, {}).update(dict(zip(test, res["predictions"])))
        reports.append(rep)
    return reports


def cmd_finetune(args, argv):
    out = _out_dir(args)
    manifests = [load_manifest(p) for p in args.manifests.split(",") if p]
    if not manifests:
        raise UsageError("finetune: --manifests needs at least one manifest")
    settings = FinetuneSettings(
        learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.epochs, patience=args.patience,
        sampler=args.sampler,
    )
    _write_run(out, args, argv)
    reports = run_protocol(args.checkpoint, manifests, args.multitask, settings, args.folds, args.seed, out,
                           encoder=args.encoder)
    for rep in reports:
        (out / f"report_{rep.model_name}.json").write_text(rep.to_json() + "\n")
    table = render_tables(reports)
    (out / "tables.txt").write_text(table)
    print(table, end="")


def _split_ids(path):
    obj = json.loads(Path(path).read_text())
    if isinstance(obj, list):
        return [str(x) for x in obj]
    if isinstance(obj, dict) and "test" in obj:
        return [str(x) for x in obj["test"]]
    raise ManifestError(f"{path}: expected a JSON id list or an object with a 'test' list")


def cmd_evaluate(args, argv):
    manifest = load_manifest(args.manifest)
    ids = _split_ids(args.split) if args.split else [p.piece_id for p in manifest.pieces]
    lab = {p.piece_id: p.label for p in manifest.pieces}
    missing = [i for i in ids if i not in lab]
    if missing:
        raise ManifestError(f"split ids not in manifest: {missing[:5]}")
    truths = [lab[i] for i in ids]
    if args.predictions:
        pred_map = json.loads(Path(args.predictions).read_text())
        preds = [int(pred_map[i]) for i in ids]
        res = classification_metrics(preds, truths, manifest.num_classes)
        res["predictions"] = preds
        name = "predictions"
    elif args.model:
        model = load_checkpoint(args.model)
        head = args.head or manifest.name
        by_id = {p.piece_id: p for p in manifest.pieces}
        scores = [manifest.load_score(by_id[i]) for i in ids]
        res = evaluate_model(model, scores, truths, head)
        name = Path(args.model).stem
    else:
        raise UsageError("evaluate: give --model or --predictions")
    rep = EvalReport(name, air={manifest.name: air(truths)})
    rep.add_fold(manifest.name, res)
    rep.predictions[manifest.name] = dict(zip(ids, res["predictions"]))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rep.to_json() + "\n")
    print(f"acc0 = {res['acc0']:.4f}  acc1 = {res['acc1']:.4f}  mse = {res['mse']:.4f}")


def cmd_rank(args, argv):
    manifest = load_manifest(args.manifest)
    model = load_checkpoint(args.model)
    scores = [manifest.load_score(p) for p in manifest.pieces]
    res = zero_shot_rank(model, scores, manifest.labels, args.head)
    rep = EvalReport(f"{Path(args.model).stem}[{args.head}]")
    rep.add_fold(manifest.name, {"tau_c": res["tau_c"]})
    rep.predictions[manifest.name] = {p.piece_id: s for p, s in zip(manifest.pieces, res["scores"])}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(rep.to_json() + "\n")
    print(f"tau_c = {res['tau_c']:.4f}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sheetdiff", description=__doc__)
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth", help="generate a synthetic bootleg corpus")
    s.add_argument("--pieces", type=int, required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.add_argument("--name", default="synth")
    s.add_argument("--w-min", type=int, default=16)
    s.add_argument("--w-max", type=int, default=96)
    s.add_argument("--density-gain", type=float, default=2.0)
    s.add_argument("--range-gain", type=float, default=1.0)
    s.add_argument("--polyphony-gain", type=float, default=1.0)
    s.add_argument("--label-noise", type=float, default=0.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("stats", help="corpus statistics of a manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("pretrain", help="next-step pretraining on a .bsc corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--encoder", choices=["emb", "fc", "cnn"], default="fc")
    s.add_argument("--preset", choices=["desk", "paper"], default="desk")
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--context-len", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="cross-validated fine-tuning of the classification tail")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifests", required=True, help="comma-separated manifest paths")
    s.add_argument("--multitask", action="store_true")
    s.add_argument("--encoder", choices=["emb", "fc", "cnn"], help="reject checkpoints with another encoder")
    s.add_argument("--sampler", choices=["balanced", "natural"], default="balanced")
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="Acc0 / Acc1 / MSE of a fine-tuned model on a split")
    s.add_argument("--model")
    s.add_argument("--predictions", help="JSON {piece_id: class} instead of a model")
    s.add_argument("--manifest", required=True)
    s.add_argument("--split")
    s.add_argument("--head")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("rank", help="zero-shot PCA ranking scored by Kendall tau-c")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--head", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rank)
    return p


def dispatch(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args, argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except DATA_ERRORS as exc:
        print(f"sheetdiff: data error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(dispatch())
