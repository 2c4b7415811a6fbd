"""Command-line entry point: ``relconv {gen-data,train,eval,gradcheck,analyze}``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration or input
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .config import ConfigError, RunConfig, TaskConfig, bundled_config_path, load_config
from .experiment import PARTITIONS, build_datasets, expand_runs, run_training
from .io import FormatError, load_checkpoint, load_dataset, save_dataset_binary, save_dataset_jsonl
from .tasks import CARD_DIM, GeneratorError, TaskInstance, make_set_split
from .training import DataShapeError, NumericalError, check_dataset, evaluate

log = logging.getLogger("relconv")

EXIT_GRADCHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load(args, default: str | None = None) -> RunConfig:
    if args.config is None:
        if default is None:
            raise ConfigError("--config is required")
        cfg = load_config(bundled_config_path(default))
    else:
        path = Path(args.config)
        # bare names resolve to the bundled reference configs
        if not path.exists() and not path.suffix:
            path = bundled_config_path(args.config)
        cfg = load_config(path)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig | None, fallback: str) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.out:
        return Path(cfg.out)
    return Path(fallback)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    if cfg.task is None:
        raise ConfigError("config has no task block")
    root = _out_dir(args, cfg, "data")
    for sub, run in expand_runs(cfg):
        out = root / sub if sub else root
        out.mkdir(parents=True, exist_ok=True)
        data = build_datasets(run.task, run.seed)
        written = []
        for part in PARTITIONS:
            if args.format in ("jsonl", "both"):
                save_dataset_jsonl(out / f"{part}.jsonl", data[part])
                written.append(f"{part}.jsonl")
            if args.format in ("binary", "both"):
                save_dataset_binary(out / f"{part}.bin", data[part])
                written.append(f"{part}.bin")
        log.info("wrote %s to %s", ", ".join(written), out)
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg, "runs/train")

    def progress(rec):
        log.info("epoch %d  train_loss %.4f  train_acc %.4f  val_acc %.4f",
                 rec["epoch"], rec["train_loss"], rec["train_acc"], rec["val_acc"])

    for sub, run in expand_runs(cfg):
        target = out / sub if sub else out
        if sub:
            log.info("task %s", sub)
        report = run_training(run, target, log=progress)
        _emit({"out": str(target), "test_acc": report.test_acc, "best_epoch": report.best_epoch,
               "epochs_run": len(report.epochs)})
    return 0


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.checkpoint)
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        cfg = _load(args)
        if cfg.task is None:
            raise ConfigError("eval needs --dataset or a config with a task block")
        ds = build_datasets(cfg.task, cfg.seed)[args.partition]
    check_dataset(model.spec, "eval", ds)
    acc, loss = evaluate(model, ds)
    _emit({"accuracy": acc, "loss": loss, "n": len(ds)})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    cfg = _load(args, default="gradcheck")
    gc = cfg.gradcheck
    h, tol, comps = (gc.h, gc.tol, gc.components) if gc is not None else (1e-5, 1e-4, None)
    entries = run_suite(comps, h=h, seed=cfg.seed)
    failed = 0
    for e in entries:
        ok = e.result.max_rel_error < tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {e.name:<28} max_rel_error={e.result.max_rel_error:.3e}  "
              f"checked={e.result.n_checked} skipped={e.result.n_skipped}")
    print(f"{len(entries) - failed}/{len(entries)} components within {tol:g}")
    return EXIT_GRADCHECK_FAILED if failed else 0


def _task_from_header(header: dict) -> TaskConfig:
    task = header.get("meta", {}).get("task")
    if not task:
        raise ConfigError("checkpoint carries no task description; pass --config")
    return TaskConfig(**task)


def cmd_analyze(args) -> int:
    out = _out_dir(args, None, "analysis")
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "context-norm-demo":
        result = analysis.context_norm_demo()
        (out / "context_norm.json").write_text(json.dumps(result, sort_keys=True, indent=1) + "\n")
        _emit({"out": str(out / "context_norm.json")})
        return 0
    if not args.checkpoint:
        raise ConfigError(f"analyze --mode {args.mode} needs --checkpoint")
    model, header = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    if args.mode == "set-geometry":
        if model.spec.kind != "relconvnet" or model.spec.d_in != CARD_DIM:
            raise ConfigError("set-geometry needs a RelConvNet checkpoint trained on Set cards")
        task = header.get("meta", {}).get("task") or {}
        split = partition = None
        if args.partition and task.get("name") == "set":
            split_seed = task.get("split_seed")
            split = make_set_split(split_seed if split_seed is not None else header.get("seed", 0))
            partition = args.partition
        result = analysis.export_set_geometry(model, args.samples, seed, out / "set_geometry.csv", split, partition)
        summary = {"probe_accuracy": result["probe_accuracy"], "n": len(result["rows"]),
                   "explained_variance_ratio": result["pca"].explained_variance_ratio.tolist()}
        (out / "set_geometry.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
        _emit(summary)
        return 0
    # group-attention
    if args.dataset:
        ds = load_dataset(args.dataset)
    else:
        cfg = _task_from_header(header)
        ds = build_datasets(replace(cfg, sizes=replace(cfg.sizes, train=1, val=1, test=max(1, args.index + 1))),
                            seed)["test"]
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"--index {args.index} outside dataset of {len(ds)} instances")
    inst = TaskInstance(ds.X[args.index], int(ds.y[args.index]), {**ds.meta, "index": args.index})
    record = analysis.export_group_attention(model, inst, out / "group_attention.json")
    entropies = [analysis.mean_row_entropy(np.array(b["alpha"])) for b in record["blocks"]]
    _emit({"out": str(out / "group_attention.json"), "blocks": len(record["blocks"]), "mean_row_entropy": entropies})
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relconv", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config, or the name of a bundled config")
    common.add_argument("--seed", type=int, help="override the config's run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write train/val/test datasets")
    p.add_argument("--format", choices=("jsonl", "binary", "both"), default="both")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a model; writes metrics, summary, checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy and loss of a checkpoint as JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="JSONL or binary dataset file")
    p.add_argument("--partition", choices=PARTITIONS, default="test", help="partition generated from --config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("analyze", parents=[common], help="write analysis artifacts")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=("set-geometry", "group-attention", "context-norm-demo"), required=True)
    p.add_argument("--samples", type=int, default=2000, help="set-geometry sample size")
    p.add_argument("--partition", choices=PARTITIONS, help="draw set triplets from this split partition")
    p.add_argument("--dataset", help="dataset to take the group-attention instance from")
    p.add_argument("--index", type=int, default=0, help="instance index for group-attention")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except (ConfigError, FormatError, DataShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except GeneratorError as exc:
        print(f"data generation failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
