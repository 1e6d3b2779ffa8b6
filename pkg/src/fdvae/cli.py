"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
error. Failures print a single ``error: <Class>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .errors import ConfigError, DataError, FDVAEError

OUTPUT_ROOT_ENV = "FDVAE_OUTPUT_ROOT"

SUBCOMMANDS = ("prepare-data", "train-repr", "train-downstream", "evaluate", "run-matrix",
               "ablate", "export-embeddings", "report")


def _default_out() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, "runs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: ConfigError: {message}", file=sys.stderr)
        sys.exit(2)


def _add_config_args(p, required=True):
    p.add_argument("--config", "-c", required=required, help="experiment config file (YAML)")
    p.add_argument("--set", "-s", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value by dotted key, e.g. schedule.batch_size=128 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fdvae", description="Fairness-aware disentangling VAE toolkit")
    parser.add_argument("--verbose", "-v", action="count", default=0, help="increase log verbosity")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("prepare-data", help="materialize dataset splits or convert raw annotations")
    _add_config_args(p, required=False)
    p.add_argument("--out", "-o", default=None, help="output directory")
    p.add_argument("--from-utk", metavar="DIR", help="convert a raw UTK Face image folder to the dataset layout")
    p.add_argument("--from-celeba", metavar="DIR",
                   help="convert a raw CelebA folder (list_attr_celeba.txt, list_eval_partition.txt, images)")

    p = sub.add_parser("train-repr", help="train the representation model for one seed")
    _add_config_args(p)
    p.add_argument("--out", "-o", default=None, help="run directory")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: first of config seeds)")
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from an epoch checkpoint")

    p = sub.add_parser("train-downstream", help="train the downstream classifier on a frozen encoder")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True, help="representation checkpoint")
    p.add_argument("--out", "-o", default=None, help="run directory")

    p = sub.add_parser("evaluate", help="compute metrics from a prediction log or a downstream checkpoint")
    _add_config_args(p, required=False)
    p.add_argument("--predictions", help="CSV with columns sample_id,prediction,target,protected")
    p.add_argument("--checkpoint", help="downstream checkpoint evaluated on the config's test split")
    p.add_argument("--json", action="store_true", help="print the metric record as JSON only")

    p = sub.add_parser("run-matrix", help="run several variants over all configured seeds")
    _add_config_args(p)
    p.add_argument("--variants", default="fdvae,vae,beta_vae,factor_vae,ffvae_approx",
                   help="comma-separated variants derived from the base config")
    p.add_argument("--out", "-o", default=None, help="output root")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("ablate", help="run the step-by-step component ablation")
    _add_config_args(p)
    p.add_argument("--out", "-o", default=None, help="output root")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("export-embeddings", help="export subspace embeddings and their 2-D projection")
    p.add_argument("--checkpoint", required=True, help="representation or downstream checkpoint")
    p.add_argument("--split", choices=("train", "val", "test"), default="test", help="dataset split")
    p.add_argument("--out", "-o", required=True, help="output directory")

    p = sub.add_parser("report", help="results table and plots from run directories")
    p.add_argument("runs", nargs="+", help="run directories (or roots containing them)")
    p.add_argument("--out", "-o", default=None, help="report directory (default: <first root>/report)")
    return parser


# ---------------------------------------------------------------------------


def _load_config(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config, args.overrides)
    print("resolved config:")
    print("  " + cfg.to_yaml().replace("\n", "\n  ").rstrip())
    sys.stdout.flush()
    return cfg


def _cmd_prepare_data(args):
    from .datasets import convert_celeba, convert_utk
    from .experiments import resolve_splits

    out = Path(args.out or _default_out())
    if args.from_utk or args.from_celeba:
        print("resolved config: none (conversion)")
        if args.from_utk:
            n = convert_utk(args.from_utk, out)
        else:
            n = convert_celeba(args.from_celeba, out)
        print(f"wrote {n} annotated records to {out}")
        return 0
    if not args.config:
        raise ConfigError("prepare-data needs --config or one of --from-utk/--from-celeba")
    cfg = _load_config(args)
    out.mkdir(parents=True, exist_ok=True)
    for name, ds in zip(("train", "val", "test"), resolve_splits(cfg)):
        ds.save(out / f"{name}.npz")
        cells = {f"({t},{p})": int(((ds.target == t) & (ds.protected == p)).sum())
                 for t in (1, 0) for p in (1, 0)}
        print(f"{name}: {len(ds)} samples, cells (target,protected) {cells}")
    return 0


def _cmd_train_repr(args):
    from .experiments import resolve_splits
    from .trainer import Checkpoint, train_representation

    cfg = _load_config(args)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    cfg = cfg.with_seed(seed)
    out = Path(args.out or Path(_default_out()) / cfg.config_hash() / f"seed-{seed}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    resume = Checkpoint.load(args.resume) if args.resume else None
    ck = train_representation(cfg, resolve_splits(cfg), out_dir=out, resume=resume)
    print(f"representation checkpoint: {out / 'checkpoints' / 'repr-final.pt'} (epoch {ck.epoch})")
    return 0


def _cmd_train_downstream(args):
    from .experiments import resolve_splits
    from .trainer import Checkpoint, train_downstream

    cfg = _load_config(args)
    repr_ck = Checkpoint.load(args.checkpoint)
    cfg = cfg.with_seed(repr_ck.config["schedule"]["seed"])
    out = Path(args.out or Path(args.checkpoint).resolve().parent.parent)
    ck = train_downstream(cfg, repr_ck, resolve_splits(cfg), out_dir=out)
    print(f"downstream checkpoint: {out / 'checkpoints' / 'downstream-best.pt'} "
          f"(best epoch {ck.epoch}, val EAcc {ck.extra['best_val_equalized_accuracy']:.4f})")
    return 0


def _cmd_evaluate(args):
    from .metrics import evaluate_predictions, read_prediction_log

    if args.predictions:
        if args.config:
            _load_config(args)
        elif not args.json:
            print("resolved config: none (prediction log)")
        _, pred, target, protected = read_prediction_log(args.predictions)
        report = evaluate_predictions(pred, target, protected)
    elif args.checkpoint:
        from .experiments import resolve_splits
        from .trainer import Checkpoint, evaluate_downstream

        ck = Checkpoint.load(args.checkpoint)
        if args.config:
            cfg = _load_config(args)
        else:
            cfg = ck.experiment_config
            if not args.json:
                print("resolved config (from checkpoint):")
                print("  " + cfg.to_yaml().replace("\n", "\n  ").rstrip())
        report, _ = evaluate_downstream(ck, resolve_splits(cfg)[2])
    else:
        raise ConfigError("evaluate needs --predictions or --checkpoint")
    if args.json:
        print(json.dumps(report.as_dict(), sort_keys=True))
    else:
        print(report.table_row())
        print(json.dumps(report.as_dict(), sort_keys=True))
    return 0


def _run_one(payload):
    from .config import ExperimentConfig
    from .experiments import run_seed

    cfg_dict, seed, out = payload
    return run_seed(ExperimentConfig.from_dict(cfg_dict), seed, out).as_record()


def _run_configs(configs, out, workers):
    from .experiments import ResultRow, results_table

    jobs = [(c.to_dict(), s, str(out)) for c in configs for s in c.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    rows = [ResultRow.from_record(r) for r in records]
    print(results_table(rows, out_dir=Path(out) / "report"), end="")
    return 0


def _cmd_run_matrix(args):
    from .config import baseline_config

    base = _load_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    configs = [baseline_config(v, base) for v in variants]
    return _run_configs(configs, Path(args.out or _default_out()), args.workers)


def _cmd_ablate(args):
    from .config import component_ablation_configs

    base = _load_config(args)
    return _run_configs(component_ablation_configs(base), Path(args.out or _default_out()), args.workers)


def _cmd_export_embeddings(args):
    from .experiments import export_embeddings, resolve_splits
    from .trainer import Checkpoint

    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.experiment_config
    print("resolved config (from checkpoint):")
    print("  " + cfg.to_yaml().replace("\n", "\n  ").rstrip())
    ds = resolve_splits(cfg)[("train", "val", "test").index(args.split)]
    emb, proj = export_embeddings(ck, ds, args.out)
    print(f"wrote {emb} and {proj}")
    return 0


def find_run_dirs(paths) -> list:
    """Run directories (holding ``config.yaml``) at or below the given paths."""
    out = []
    for p in map(Path, paths):
        if (p / "config.yaml").exists():
            out.append(p)
        else:
            out.extend(sorted(c.parent for c in p.glob("**/config.yaml")))
    return out


def report(run_paths, out_dir) -> dict:
    """Write the results table and plots; returns the written file paths."""
    from .errors import MissingMetricsFile
    from .experiments import load_run_rows, results_table
    from .plots import loss_series, metric_series, plot_projection, plot_series
    from .trainer import TrainingLog

    run_dirs = find_run_dirs(run_paths)
    if not run_dirs:
        raise MissingMetricsFile(f"no run directories under {', '.join(map(str, run_paths))}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = load_run_rows(run_dirs)
    table = results_table(rows, out_dir=out_dir)
    written = {"table": out_dir / "results.txt", "plots": []}
    for row, d in zip(rows, run_dirs):
        tag = f"{Path(d).parent.name}-{Path(d).name}"
        repr_log = d / "logs" / "train_repr.jsonl"
        ds_log = d / "logs" / "train_downstream.jsonl"
        if repr_log.exists():
            path = out_dir / f"{tag}-losses.png"
            plot_series(loss_series(TrainingLog.read(repr_log)), path, f"{row.label} seed {row.seed}: losses",
                        "step", log_scale_keys=("recon", "kl"))
            written["plots"].append(path)
        if ds_log.exists():
            path = out_dir / f"{tag}-fairness.png"
            plot_series(metric_series(TrainingLog.read(ds_log)), path,
                        f"{row.label} seed {row.seed}: downstream (validation)", "epoch")
            written["plots"].append(path)
        proj = d / "embeddings" / "projection.csv"
        if proj.exists():
            path = out_dir / f"{tag}-projection.png"
            plot_projection(proj, path, f"{row.label} seed {row.seed}: subspace PCA")
            written["plots"].append(path)
    print(table, end="")
    return written


def _cmd_report(args):
    print("resolved config: none (report)")
    out = args.out or Path(args.runs[0]) / "report"
    written = report(args.runs, out)
    print(f"wrote {written['table']} and {len(written['plots'])} plot files to {out}")
    return 0


_HANDLERS = {
    "prepare-data": _cmd_prepare_data,
    "train-repr": _cmd_train_repr,
    "train-downstream": _cmd_train_downstream,
    "evaluate": _cmd_evaluate,
    "run-matrix": _cmd_run_matrix,
    "ablate": _cmd_ablate,
    "export-embeddings": _cmd_export_embeddings,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _HANDLERS[args.command](args)
    except FDVAEError as exc:
        print(f"error: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        err = DataError(str(exc))
        print(f"error: DataError: {exc}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
