"""Command-line entry point: synth / train / eval / export / ablate.

Every run resolves its flags up front (a --config key=value file supplies
defaults, explicit flags win), validates before touching the output
directory, and finishes by writing a manifest recording the command, the
resolved configuration, input digests, and output names.  All randomness
flows from --seed.
"""

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import (
    SynthConfig,
    gen_synthetic,
    kfold_split,
    load_dataset,
    preprocess,
    save_dataset,
)
from .errors import ConfigError, DataError
from .evaluation import (
    PredictionSet,
    accuracy,
    auc,
    export_knowledge_states,
    export_module_outputs,
    pairwise_t_matrix,
)
from .model import ModelConfig, Parameters, VARIANTS
from .training import (
    TrainConfig,
    grid_search,
    predictions_over,
    run_ablation,
    run_cv,
    train,
)

DATASET_CSV = "dataset.csv"
ORACLE_CSV = "oracle.csv"
CHECKPOINT = "checkpoint.bin"
EPOCHS_CSV = "epochs.csv"
REPORT_CSV = "report.csv"
MANIFEST = "manifest.json"
PMATRIX_CSV = "pmatrix.csv"
STEPS_CSV = "steps.csv"
STATES_CSV = "states.csv"


def fold_checkpoint(i):
    return f"checkpoint_fold{i}.bin"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _write_csv(path, fieldnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _write_manifest(out, command, args, inputs, outputs, started, extra=None):
    config = {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")
    }
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()}
    doc = {
        "version": __version__,
        "command": command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(outputs),
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        doc.update(extra)
    with open(Path(out) / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise DataError(f"no {MANIFEST} in run directory {run_dir}")
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _int_pair(text):
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected lo,hi - got {text!r}")
    return (int(parts[0]), int(parts[1]))


def _int_list(text):
    try:
        return [int(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


def _float_list(text):
    try:
        return [float(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _load_dataset(args):
    ds = load_dataset(args.data)
    return preprocess(ds, min_len=args.min_len, max_len=args.max_len)


def _model_config(args, ds):
    return ModelConfig(
        n_questions=ds.n_questions,
        n_kcs=ds.n_kcs,
        dim=args.dim,
        lambda_aux=args.lambda_aux,
        variant=args.variant,
    )


def _train_config(args):
    return TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        max_epochs=args.max_epochs,
        patience=args.patience,
        seed=args.seed,
        grad_clip=0.0 if args.no_clip else 5.0,
    )


# -- subcommands -------------------------------------------------------------


def cmd_synth(args):
    cfg = SynthConfig(
        students=args.students,
        questions=args.questions,
        kcs=args.kcs,
        kcs_per_question=args.kcs_per_question,
        gamma=args.gamma,
        seq_len=args.seq_len,
        seed=args.seed,
    )
    started = time.perf_counter()
    ds, oracle = gen_synthetic(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / DATASET_CSV)
    rows = [
        {"student_id": sid, "timestamp": ts, "prob": repr(p)}
        for (sid, ts), p in sorted(oracle.items())
    ]
    _write_csv(out / ORACLE_CSV, ["student_id", "timestamp", "prob"], rows)
    _write_manifest(out, "synth", args, [], [DATASET_CSV, ORACLE_CSV], started)
    print(f"wrote {len(ds.sequences)} sequences, {ds.n_interactions} interactions to {out}")


def cmd_train(args):
    started = time.perf_counter()
    fold_i = None
    if not args.grid and args.fold != "all":
        try:
            fold_i = int(args.fold)
        except ValueError:
            raise ConfigError(f"--fold must be an integer or 'all', got {args.fold!r}")
        if not (0 <= fold_i < args.k):
            raise ConfigError(f"--fold must be in [0, {args.k}) or 'all', got {fold_i}")
    ds = _load_dataset(args)
    mcfg = _model_config(args, ds)
    tcfg = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = [REPORT_CSV]
    extra = {}

    if args.grid:
        result = grid_search(
            ds,
            mcfg,
            tcfg,
            lambdas=args.grid_lambdas,
            lrs=args.grid_lrs,
            dims=args.grid_dims,
            jobs=args.jobs,
        )
        _write_csv(out / REPORT_CSV, ["lambda", "lr", "d", "valid_auc"], result.table)
        extra["best"] = result.best
        print(
            "best cell: lambda={lambda} lr={lr} d={d} valid_auc={valid_auc:.4f}".format(
                **result.best
            )
        )
    elif args.fold == "all":
        cv = run_cv(ds, mcfg, tcfg, k=args.k, jobs=args.jobs)
        epoch_rows = []
        for fold in cv.folds:
            fold.report.best_params.save(out / fold_checkpoint(fold.fold))
            outputs.append(fold_checkpoint(fold.fold))
            for row in fold.report.epoch_rows():
                epoch_rows.append({"fold": fold.fold, **row})
        _write_csv(out / EPOCHS_CSV, ["fold", "epoch", "train_loss", "valid_auc"], epoch_rows)
        _write_csv(out / REPORT_CSV, ["fold", "auc", "acc", "best_epoch"], cv.rows())
        outputs.append(EPOCHS_CSV)
        print(f"cv mean auc {cv.mean_auc:.4f} +/- {cv.std_auc:.4f} over {args.k} folds")
    else:
        folds = kfold_split(ds, k=args.k, seed=args.seed)
        train_idx, valid_idx, test_idx = folds[fold_i]
        seqs = ds.sequences
        report = train(
            mcfg,
            replace(tcfg, fold=fold_i),
            [seqs[i] for i in train_idx],
            [seqs[i] for i in valid_idx],
        )
        report.best_params.save(out / CHECKPOINT)
        _write_csv(
            out / EPOCHS_CSV,
            ["epoch", "train_loss", "valid_auc"],
            report.epoch_rows(),
        )
        preds, labels = predictions_over(
            report.best_params, [seqs[i] for i in test_idx], tcfg.batch_size, mcfg
        )
        ps = PredictionSet(preds, labels)
        row = {
            "fold": fold_i,
            "auc": auc(ps),
            "acc": accuracy(ps),
            "best_epoch": report.best_epoch,
        }
        _write_csv(out / REPORT_CSV, ["fold", "auc", "acc", "best_epoch"], [row])
        outputs += [CHECKPOINT, EPOCHS_CSV]
        print(f"fold {fold_i}: test auc {row['auc']:.4f} acc {row['acc']:.4f}")

    _write_manifest(out, "train", args, [args.data], outputs, started, extra)


def _run_fold_metrics(run_dir, ds, args):
    """Per-fold (auc, acc) for one run directory's checkpoints."""
    manifest = _read_manifest(run_dir)
    cfg = manifest["config"]
    k = int(cfg.get("k", 5))
    seed = int(manifest.get("seed", 0))
    folds = kfold_split(ds, k=k, seed=seed)
    run = Path(run_dir)

    pairs = []
    if (run / CHECKPOINT).exists():
        pairs.append((int(cfg.get("fold", 0)), run / CHECKPOINT))
    else:
        for i in range(k):
            if (run / fold_checkpoint(i)).exists():
                pairs.append((i, run / fold_checkpoint(i)))
    if not pairs:
        raise DataError(f"no checkpoint files in run directory {run_dir}")

    rows = []
    for fold_i, path in pairs:
        params = Parameters.load(path)
        test_idx = folds[fold_i][2]
        preds, labels = predictions_over(
            params, [ds.sequences[i] for i in test_idx], 64, params.config
        )
        ps = PredictionSet(preds, labels)
        rows.append({"fold": fold_i, "auc": auc(ps), "acc": accuracy(ps)})
    return rows


def cmd_eval(args):
    started = time.perf_counter()
    ds = _load_dataset(args)
    per_run = {}
    for run_dir in args.run:
        name = Path(run_dir).name or str(run_dir)
        if name in per_run:
            name = str(run_dir)
        per_run[name] = _run_fold_metrics(run_dir, ds, args)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_rows = []
    for name, rows in per_run.items():
        aucs = [r["auc"] for r in rows]
        accs = [r["acc"] for r in rows]
        for r in rows:
            report_rows.append({"run": name, **r})
        n = len(rows)

        def std(xs):
            mean = sum(xs) / n
            return (sum((x - mean) ** 2 for x in xs) / n) ** 0.5

        report_rows.append(
            {"run": name, "fold": "mean", "auc": sum(aucs) / n, "acc": sum(accs) / n}
        )
        report_rows.append({"run": name, "fold": "std", "auc": std(aucs), "acc": std(accs)})
        print(f"{name}: auc {sum(aucs) / n:.4f} acc {sum(accs) / n:.4f} ({n} folds)")
    _write_csv(out / REPORT_CSV, ["run", "fold", "auc", "acc"], report_rows)
    outputs = [REPORT_CSV]

    if len(per_run) >= 2:
        names = list(per_run)
        counts = {len(per_run[n]) for n in names}
        if len(counts) != 1 or counts == {1}:
            raise DataError(
                "p-value matrix needs the same number of folds (>= 2) in every run"
            )
        _, matrix = pairwise_t_matrix({n: [r["auc"] for r in per_run[n]] for n in names})
        rows = []
        for name, mrow in zip(names, matrix):
            rows.append({"run": name, **{n: v for n, v in zip(names, mrow)}})
        _write_csv(out / PMATRIX_CSV, ["run"] + names, rows)
        outputs.append(PMATRIX_CSV)

    _write_manifest(out, "eval", args, [args.data], outputs, started)


def cmd_export(args):
    started = time.perf_counter()
    ds = _load_dataset(args)
    chunks = [s for s in ds.sequences if s.student_id == args.student]
    if not chunks:
        raise DataError(
            f"unknown student id {args.student!r}; dataset has {len(ds.students())} students"
        )
    seq = chunks[0]

    run = Path(args.run)
    path = run / CHECKPOINT
    if not path.exists():
        path = run / fold_checkpoint(0)
    if not path.exists():
        raise DataError(f"no checkpoint files in run directory {args.run}")
    params = Parameters.load(path)

    kc_subset = args.kcs if args.kcs is not None else list(range(ds.n_kcs))
    steps = export_module_outputs(params, seq)
    states = export_knowledge_states(params, seq, kc_subset)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / STEPS_CSV,
        ["step", "question", "response", "r_hat", "sigma_alpha", "sigma_beta", "sigma_zeta"],
        steps,
    )
    state_rows = [
        {"step": t + 1, **{f"kc_{k}": v for k, v in zip(kc_subset, row)}}
        for t, row in enumerate(states)
    ]
    _write_csv(out / STATES_CSV, ["step"] + [f"kc_{k}" for k in kc_subset], state_rows)
    _write_manifest(out, "export", args, [args.data], [STEPS_CSV, STATES_CSV], started)
    print(f"exported {len(steps)} steps for student {args.student!r} to {out}")


def cmd_ablate(args):
    started = time.perf_counter()
    ds = _load_dataset(args)
    mcfg = _model_config(args, ds)
    tcfg = _train_config(args)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}, choose from {VARIANTS}")

    report = run_ablation(ds, mcfg, tcfg, k=args.k, variants=variants, jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant, cv in report.per_variant.items():
        for f in cv.folds:
            rows.append({"variant": variant, "fold": f.fold, "auc": f.test_auc, "acc": f.test_acc})
        rows.append({"variant": variant, "fold": "mean", "auc": cv.mean_auc, "acc": cv.mean_acc})
        rows.append({"variant": variant, "fold": "std", "auc": cv.std_auc, "acc": cv.std_acc})
        print(f"{variant}: auc {cv.mean_auc:.4f} +/- {cv.std_auc:.4f}")
    _write_csv(out / REPORT_CSV, ["variant", "fold", "auc", "acc"], rows)
    outputs = [REPORT_CSV]

    if len(variants) >= 2 and args.k >= 2:
        _, matrix = pairwise_t_matrix(
            {v: [f.test_auc for f in report.per_variant[v].folds] for v in variants}
        )
        mrows = [
            {"variant": v, **{n: p for n, p in zip(variants, mrow)}}
            for v, mrow in zip(variants, matrix)
        ]
        _write_csv(out / PMATRIX_CSV, ["variant"] + variants, mrows)
        outputs.append(PMATRIX_CSV)

    _write_manifest(out, "ablate", args, [args.data], outputs, started)


# -- parser ------------------------------------------------------------------


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="interaction-log CSV")
    p.add_argument("--min-len", type=int, default=3, help="drop shorter sequences")
    p.add_argument("--max-len", type=int, default=200, help="chunk longer sequences")


def _add_model_flags(p):
    p.add_argument("--d", dest="dim", type=int, default=64, help="hidden/embedding size")
    p.add_argument("--lambda", dest="lambda_aux", type=float, default=1.0,
                   help="auxiliary loss weight")
    p.add_argument("--variant", choices=VARIANTS, default="full")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=200)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--no-clip", action="store_true", help="disable gradient clipping")
    p.add_argument("--k", type=int, default=5, help="number of folds")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold/cell workers")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qckt",
        description="question-centric knowledge tracing: data, training, evaluation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic interaction log")
    p.add_argument("--students", type=int, default=100)
    p.add_argument("--questions", type=int, default=50)
    p.add_argument("--kcs", type=int, default=10)
    p.add_argument("--kcs-per-question", type=_int_pair, default=(1, 3), metavar="LO,HI")
    p.add_argument("--gamma", type=float, default=0.05, help="per-attempt ability gain")
    p.add_argument("--seq-len", type=_int_pair, default=(10, 50), metavar="LO,HI")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value defaults file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one fold, all folds, or the tuning grid")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--fold", default="all", help="fold index or 'all'")
    p.add_argument("--grid", action="store_true", help="run the 30-cell tuning grid")
    p.add_argument("--grid-lambdas", type=_float_list, default=None, metavar="0,0.5,1",
                   help="override the lambda axis of --grid")
    p.add_argument("--grid-lrs", type=_float_list, default=None, metavar="1e-3,1e-4",
                   help="override the lr axis of --grid")
    p.add_argument("--grid-dims", type=_int_list, default=None, metavar="64,256",
                   help="override the d axis of --grid")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value defaults file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate run directories on a dataset")
    _add_data_flags(p)
    p.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value defaults file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="per-step module outputs and knowledge states")
    _add_data_flags(p)
    p.add_argument("--run", required=True, help="run directory with a checkpoint")
    p.add_argument("--student", required=True, help="student id as it appears in the data")
    p.add_argument("--kcs", type=_int_list, default=None, metavar="0,1,2",
                   help="KC subset for the state matrix (default: all)")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value defaults file")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("ablate", help="cross-validate every model variant")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--variants", default=None, help="comma-separated subset (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="key=value defaults file")
    p.set_defaults(func=cmd_ablate)

    return parser


def _apply_config_file(argv):
    """Turn --config key=value lines into flags placed before the explicit
    ones, so the file provides defaults and the command line wins."""
    if "--config" not in argv:
        return argv
    path = argv[argv.index("--config") + 1]
    injected = []
    with open(path, "r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path} line {ln}: expected key=value, got {raw.strip()!r}")
            key, value = line.split("=", 1)
            flag = "--" + key.strip().replace("_", "-")
            injected += [flag, value.strip()]
    return [argv[0]] + injected + argv[1:]


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if argv and not argv[0].startswith("-"):
            argv = _apply_config_file(argv)
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:
            return 0 if exc.code in (0, None) else 1
        args.func(args)
        return 0
    except (ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
