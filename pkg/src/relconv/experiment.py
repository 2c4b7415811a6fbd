"""Run configuration to datasets, training run and output files."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import RELGAMES_ALL, ConfigError, RunConfig, TaskConfig
from .io import save_checkpoint
from .tasks import (
    RELGAMES,
    Dataset,
    make_match_to_sample_dataset,
    make_relgames_dataset,
    make_set_dataset,
    make_set_split,
    make_vocab,
)
from .training import TrainReport, train

PARTITIONS = ("train", "val", "test")
METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.csv"
CHECKPOINT_FILE = "model.ckpt"


def derived_seed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a sub-stream of ``seed``."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def expand_runs(cfg: RunConfig) -> list[tuple[str | None, RunConfig]]:
    """``relgames_all`` becomes one run per relational-games task, each in its own subdirectory."""
    if cfg.task is not None and cfg.task.name == RELGAMES_ALL:
        return [(name, replace(cfg, task=replace(cfg.task, name=name))) for name in RELGAMES]
    return [(None, cfg)]


def build_datasets(task: TaskConfig, seed: int) -> dict[str, Dataset]:
    if task.name == RELGAMES_ALL:
        raise ConfigError("expand relgames_all into single tasks before building data")
    sizes = asdict(task.sizes)
    data = {}
    if task.name == "set":
        split = make_set_split(task.split_seed if task.split_seed is not None else seed)
        for k, part in enumerate(PARTITIONS):
            data[part] = make_set_dataset(split, sizes[part], derived_seed(seed, 1, k), part, task.n, task.sigma)
        return data
    vocab = make_vocab(task.vocab, task.vocab_size, task.dim)
    test_vocab = make_vocab(task.test_vocab, task.vocab_size, task.dim) if task.test_vocab else vocab
    for k, part in enumerate(PARTITIONS):
        v = test_vocab if part == "test" else vocab
        s = derived_seed(seed, 1, k)
        if task.name == "match_to_sample":
            data[part] = make_match_to_sample_dataset(v, sizes[part], s)
        else:
            data[part] = make_relgames_dataset(task.name, v, sizes[part], s)
    return data


def _require(cfg: RunConfig) -> None:
    if cfg.task is None:
        raise ConfigError("config has no task block")
    if cfg.model is None:
        raise ConfigError("config has no model block")


def write_metrics(path: Path, report: TrainReport) -> None:
    with open(path, "w") as fh:
        for rec in report.epochs:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        final = {"final": True, "best_epoch": report.best_epoch, "test_acc": report.test_acc,
                 "test_loss": report.test_loss, "entropy_initial": report.entropy_initial,
                 "seed": report.seed, "config_hash": report.config_hash, "n_params": report.n_params}
        fh.write(json.dumps(final, sort_keys=True) + "\n")


def write_summary(path: Path, cfg: RunConfig, report: TrainReport) -> None:
    last = report.epochs[-1] if report.epochs else {}
    row = {
        "task": cfg.task.name,
        "model": cfg.model.kind,
        "seed": report.seed,
        "config_hash": report.config_hash,
        "epochs_run": len(report.epochs),
        "best_epoch": report.best_epoch,
        "final_train_acc": last.get("train_acc"),
        "final_val_acc": last.get("val_acc"),
        "test_acc": report.test_acc,
        "test_loss": report.test_loss,
        "n_params": report.n_params,
        "wall_clock": f"{report.wall_clock:.3f}",
    }
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        writer.writeheader()
        writer.writerow(row)


def run_training(cfg: RunConfig, out_dir: str | Path, log=None) -> TrainReport:
    """Train per ``cfg`` and write metrics, summary and checkpoint under ``out_dir``."""
    _require(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = build_datasets(cfg.task, cfg.seed)
    identity = {k: v for k, v in cfg.to_dict().items() if k != "out"}  # output location is not part of the run
    model, report = train(cfg.model, data, cfg.optim, cfg.seed, on_epoch=log, run_config=identity)
    write_metrics(out / METRICS_FILE, report)
    write_summary(out / SUMMARY_FILE, cfg, report)
    save_checkpoint(out / CHECKPOINT_FILE, model, cfg.seed,
                    {"task": asdict(cfg.task), "config_hash": report.config_hash})
    return report
