"""Experiment harness: stats, training runs, ablations, grid sweeps.

Every subcommand is deterministic given (config, seed): metric files
contain no timestamps or volatile data and re-runs overwrite them
byte-identically. Files are written atomically (temp file + rename).

Exit codes: 0 full success, 2 partial failure (some splits/cells failed),
1 fatal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import functools
import hashlib
import itertools
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import local_stats as ls
from .datasets import REFERENCE_SPECS, make_reference_dataset
from .graph import edge_homophily, load_dataset, node_homophily
from .model import HpGmnModel, ModelConfig, train
from .nn import TrainConfig

SCHEMA_VERSION = 1

SWEEPABLE = {
    "n_memory_units", "block_hidden", "block_out", "head_hidden",
    "alpha_kpattern", "beta_entropy", "gamma_frobenius", "alpha_ppr",
    "k_max", "lr", "weight_decay",
}


@dataclass
class ExperimentConfig:
    dataset_dir: str
    out_dir: str = "runs"
    seed: int = 0
    splits: object = "all"          # "all" or a list of split ids
    workers: int = 1
    n_memory_units: int = 100
    block_hidden: int = 64
    block_out: int = 64
    head_hidden: int = 64
    alpha_kpattern: float = 0.01
    beta_entropy: float = 0.01
    gamma_frobenius: float = 1e-4
    alpha_ppr: float = 0.15
    k_max: int = 32
    lr: float = 0.01
    max_epochs: int = 500
    patience: int = 100
    weight_decay: float = 5e-4
    optimizer: str = "adam"
    estimator_hidden: int = 512
    estimator_lr: float = 0.01
    estimator_max_epochs: int = 200
    estimator_patience: int = 30
    use_attributes: bool = True
    use_class_dist: bool = True
    use_feature_dist: bool = True
    use_diffusion: bool = True
    use_kpattern: bool = True
    use_entropy: bool = True
    sweep: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        sweep = d.pop("sweep")
        for k, v in sweep.items():
            d[f"sweep_{k}"] = v
        return d

    def validate(self) -> None:
        if not Path(self.dataset_dir).is_dir():
            raise FileNotFoundError(f"dataset_dir {self.dataset_dir!r} does not exist")
        for param, grid in self.sweep.items():
            if param not in SWEEPABLE:
                raise ValueError(f"cannot sweep {param!r}; choose from "
                                 f"{sorted(SWEEPABLE)}")
            if not grid:
                raise ValueError(f"sweep grid for {param!r} is empty")
        if not any((self.use_attributes, self.use_class_dist,
                    self.use_feature_dist, self.use_diffusion)):
            raise ValueError("no local statistic enabled")


def load_config(path) -> ExperimentConfig:
    """Flat-JSON config; unknown keys are errors, sweeps use sweep_<param>."""
    with open(path) as fh:
        raw = json.load(fh)
    known = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"sweep"}
    kwargs, sweep = {}, {}
    for key, value in raw.items():
        if key.startswith("sweep_"):
            sweep[key[len("sweep_"):]] = value
        elif key in known:
            kwargs[key] = value
        else:
            raise ValueError(f"{path}: unknown config key {key!r}")
    if "dataset_dir" not in kwargs:
        raise ValueError(f"{path}: dataset_dir is required")
    return ExperimentConfig(sweep=sweep, **kwargs)


def derive_seed(*parts) -> int:
    h = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_csv_atomic(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    os.replace(tmp, path)


# -- per-split run (top level so worker processes can import it) ----------

@functools.lru_cache(maxsize=4)
def _load_dataset_cached(dataset_dir: str):
    return load_dataset(dataset_dir)


@functools.lru_cache(maxsize=4)
def _diffusion_cached(dataset_dir: str, alpha_ppr: float, k_max: int):
    g, _ = _load_dataset_cached(dataset_dir)
    return ls.ppr_diffusion(g, alpha_ppr, k_max)


@functools.lru_cache(maxsize=16)
def _full_statistics_cached(dataset_dir: str, split_id: int, alpha_ppr: float,
                            k_max: int, seed: int, estimator_hidden: int,
                            estimator_max_epochs: int, estimator_patience: int,
                            estimator_lr: float, cache_dir: str | None):
    """All four statistic blocks for one split; disk-backed when possible."""
    g, splits = _load_dataset_cached(dataset_dir)
    # the derived seed doubles as the estimator identity in the cache key,
    # so every estimator hyperparameter participates in it
    est_seed = derive_seed(seed, split_id, "estimator", estimator_hidden,
                           estimator_max_epochs, estimator_patience,
                           estimator_lr)
    if cache_dir is not None:
        key = ls.cache_key(ls.dataset_fingerprint(dataset_dir), split_id,
                           alpha_ppr, k_max, est_seed)
        blob = Path(cache_dir) / f"stats_{key}.npz"
        cached = ls.load_statistics_cache(blob)
        if cached is not None:
            return g, splits, cached
    split = next(s for s in splits if s.split_id == split_id)
    est_cfg = TrainConfig(learning_rate=estimator_lr,
                          max_epochs=estimator_max_epochs,
                          patience=estimator_patience, seed=est_seed)
    pl = ls.fit_pseudo_label_estimator(g, split, est_cfg,
                                       hidden=estimator_hidden)
    diffusion = _diffusion_cached(dataset_dir, alpha_ppr, k_max)
    stats = ls.assemble_local_statistics(g, pl, diffusion, ls.StatMasks())
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        ls.save_statistics_cache(blob, stats)
    return g, splits, stats


def masked_view(stats: ls.LocalStatistics, masks: ls.StatMasks) -> ls.LocalStatistics:
    blocks = {n: stats.blocks[n] for n in masks.enabled()}
    return ls.LocalStatistics(masks=masks, blocks=blocks)


def run_split(cfg_dict: dict, split_id: int, cache_dir=None) -> dict:
    """Train one split under a flat config dict, return the metrics dict."""
    cfg = ExperimentConfig(**{k: v for k, v in cfg_dict.items()
                              if not k.startswith("sweep_")})
    g, splits, full_stats = _full_statistics_cached(
        cfg.dataset_dir, split_id, cfg.alpha_ppr, cfg.k_max, cfg.seed,
        cfg.estimator_hidden, cfg.estimator_max_epochs, cfg.estimator_patience,
        cfg.estimator_lr, str(cache_dir) if cache_dir else None)
    split = next(s for s in splits if s.split_id == split_id)
    masks = ls.StatMasks(attributes=cfg.use_attributes,
                         class_dist=cfg.use_class_dist,
                         feature_dist=cfg.use_feature_dist,
                         diffusion=cfg.use_diffusion)
    stats = masked_view(full_stats, masks)
    model_cfg = ModelConfig(
        n_memory_units=cfg.n_memory_units, block_hidden=cfg.block_hidden,
        block_out=cfg.block_out, head_hidden=cfg.head_hidden,
        alpha_kpattern=cfg.alpha_kpattern if cfg.use_kpattern else 0.0,
        beta_entropy=cfg.beta_entropy if cfg.use_entropy else 0.0,
        gamma_frobenius=cfg.gamma_frobenius)
    run_seed = derive_seed(cfg.seed, split_id, "model")
    model = HpGmnModel(stats.widths(), g.num_classes, model_cfg, seed=run_seed,
                       init_blocks=stats.blocks)
    train_cfg = TrainConfig(learning_rate=cfg.lr, max_epochs=cfg.max_epochs,
                            patience=cfg.patience,
                            weight_decay=cfg.weight_decay, seed=run_seed,
                            optimizer=cfg.optimizer)
    metrics = train(model, g, stats, split, train_cfg)
    payload = metrics.to_dict()
    payload["schema_version"] = SCHEMA_VERSION
    return payload


def _pool_task(args):
    cfg_dict, split_id, cache_dir = args
    try:
        return split_id, run_split(cfg_dict, split_id, cache_dir), None
    except Exception as exc:   # per-split failures must not kill the run
        return split_id, None, f"{type(exc).__name__}: {exc}"


def _resolve_split_ids(cfg: ExperimentConfig) -> list[int]:
    _, splits = _load_dataset_cached(cfg.dataset_dir)
    available = [s.split_id for s in splits]
    if cfg.splits == "all":
        return available
    wanted = [int(s) for s in cfg.splits]
    missing = sorted(set(wanted) - set(available))
    if missing:
        raise ValueError(f"splits {missing} not present in dataset")
    return wanted


def _run_splits(cfg: ExperimentConfig, cfg_dict: dict, split_ids, cache_dir,
                log=print):
    """Run a batch of splits, optionally across worker processes."""
    tasks = [(cfg_dict, sid, str(cache_dir) if cache_dir else None)
             for sid in split_ids]
    results, errors = {}, {}
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for sid, payload, err in pool.map(_pool_task, tasks):
                (errors if err else results)[sid] = err or payload
    else:
        for t in tasks:
            sid, payload, err = _pool_task(t)
            (errors if err else results)[sid] = err or payload
    for sid in split_ids:
        if sid in errors:
            log(f"  split {sid}: FAILED ({errors[sid]})")
        else:
            log(f"  split {sid}: test_acc={results[sid]['test_acc']:.4f}"
                f" epochs={results[sid]['epochs_run']}")
    return results, errors


def aggregate_payload(cfg_dict: dict, results: dict, errors: dict) -> dict:
    accs = [results[sid]["test_acc"] for sid in sorted(results)]
    ents = [results[sid]["memory"]["usage_entropy"] for sid in sorted(results)]
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg_dict,
        "n_splits_requested": len(results) + len(errors),
        "n_splits_succeeded": len(results),
        "failed_splits": {str(sid): errors[sid] for sid in sorted(errors)},
        "per_split_test_acc": {str(sid): results[sid]["test_acc"]
                               for sid in sorted(results)},
        "mean_test_acc": float(np.mean(accs)) if accs else None,
        "std_test_acc": float(np.std(accs)) if accs else None,
        "mean_usage_entropy": float(np.mean(ents)) if ents else None,
    }


# -- subcommands -----------------------------------------------------------

def cmd_stats(args) -> int:
    print("dataset,nodes,edges,features,classes,node_homophily,edge_homophily")
    for d in args.dataset_dirs:
        g, _ = load_dataset(d)
        h_node = node_homophily(g)
        h_edge = edge_homophily(g) if g.num_edges else float("nan")
        print(f"{Path(d).name},{g.num_nodes},{g.num_edges},{g.num_features},"
              f"{g.num_classes},{h_node:.4f},{h_edge:.4f}")
    return 0


def _prepare(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if args.workers is not None:
        cfg.workers = args.workers
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    split_ids = _resolve_split_ids(cfg)
    cfg_dict = cfg.to_dict()
    t0 = time.perf_counter()
    results, errors = _run_splits(cfg, cfg_dict, split_ids, out / "cache")
    for sid, payload in results.items():
        write_json_atomic(out / f"split_{sid}.json", payload)
    agg = aggregate_payload(cfg_dict, results, errors)
    write_json_atomic(out / "aggregate.json", agg)
    if agg["mean_test_acc"] is not None:
        print(f"mean test accuracy {agg['mean_test_acc']:.4f}"
              f" +- {agg['std_test_acc']:.4f} over {len(results)} splits"
              f" [{time.perf_counter() - t0:.1f}s]")
    if errors and not results:
        return 1
    return 2 if errors else 0


ABLATION_VARIANTS = (
    ("full", {}),
    ("wo_attributes", {"use_attributes": False}),
    ("wo_class_dist", {"use_class_dist": False}),
    ("wo_feature_dist", {"use_feature_dist": False}),
    ("wo_diffusion", {"use_diffusion": False}),
    ("no_kpattern", {"use_kpattern": False}),
    ("no_entropy", {"use_entropy": False}),
    ("no_regularizers", {"use_kpattern": False, "use_entropy": False}),
)


def cmd_ablate(args) -> int:
    cfg, out = _prepare(args)
    split_ids = _resolve_split_ids(cfg)
    base = cfg.to_dict()
    any_failed = False
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        cfg_dict = {**base, **overrides}
        print(f"variant {name}:")
        results, errors = _run_splits(cfg, cfg_dict, split_ids, out / "cache")
        any_failed = any_failed or bool(errors)
        agg = aggregate_payload(cfg_dict, results, errors)
        vdir = out / "variants" / name
        for sid, payload in results.items():
            write_json_atomic(vdir / f"split_{sid}.json", payload)
        write_json_atomic(vdir / "aggregate.json", agg)
        rows.append([SCHEMA_VERSION, name,
                     _fmt(agg["mean_test_acc"]), _fmt(agg["std_test_acc"]),
                     len(results), _fmt(agg["mean_usage_entropy"]),
                     "ok" if not errors else "partial"])
    write_csv_atomic(out / "ablation.csv",
                     ["schema_version", "variant", "mean_test_acc",
                      "std_test_acc", "n_splits", "mean_usage_entropy",
                      "status"], rows)
    print(f"wrote {out / 'ablation.csv'}")
    return 2 if any_failed else 0


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def _cell_tag(names, values) -> str:
    return "_".join(f"{n}={v}" for n, v in zip(names, values))


def cmd_sweep(args) -> int:
    cfg, out = _prepare(args)
    if not cfg.sweep:
        print("config defines no sweep_<param> grids", file=sys.stderr)
        return 1
    split_ids = _resolve_split_ids(cfg)
    base = cfg.to_dict()
    names = sorted(cfg.sweep)
    grids = [cfg.sweep[n] for n in names]
    rows, any_failed = [], False
    for values in itertools.product(*grids):
        tag = _cell_tag(names, values)
        cell_dir = out / "cells" / tag
        agg_path = cell_dir / "aggregate.json"
        if args.resume and agg_path.exists():
            with open(agg_path) as fh:
                agg = json.load(fh)
            print(f"cell {tag}: resumed")
        else:
            cfg_dict = {**base, **dict(zip(names, values))}
            print(f"cell {tag}:")
            try:
                results, errors = _run_splits(cfg, cfg_dict, split_ids,
                                              out / "cache")
            except Exception as exc:   # a broken cell must not stop the sweep
                results, errors = {}, {"*": f"{type(exc).__name__}: {exc}"}
            agg = aggregate_payload(cfg_dict, results, errors)
            for sid, payload in results.items():
                write_json_atomic(cell_dir / f"split_{sid}.json", payload)
            write_json_atomic(agg_path, agg)
        failed = bool(agg["failed_splits"])
        any_failed = any_failed or failed
        rows.append([SCHEMA_VERSION, *values,
                     _fmt(agg["mean_test_acc"]), _fmt(agg["std_test_acc"]),
                     agg["n_splits_succeeded"],
                     "ok" if not failed else "partial"])
    write_csv_atomic(out / "sweep.csv",
                     ["schema_version", *names, "mean_test_acc",
                      "std_test_acc", "n_splits", "status"], rows)
    print(f"wrote {out / 'sweep.csv'}")
    return 2 if any_failed else 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    make_reference_dataset(args.name, out, seed=args.seed)
    print(f"wrote reference dataset {args.name!r} to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hpgmn",
                                description="heterophilous graph memory "
                                            "network experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("stats", help="dataset statistics table")
    s.add_argument("dataset_dirs", nargs="+")
    s.set_defaults(fn=cmd_stats)

    for name, fn, extra in (("train", cmd_train, "train over splits"),
                            ("ablate", cmd_ablate, "statistic/regularizer ablations"),
                            ("sweep", cmd_sweep, "hyperparameter grid sweep")):
        s = sub.add_parser(name, help=extra)
        s.add_argument("-c", "--config", required=True)
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--out", default=None)
        s.add_argument("--workers", type=int, default=None)
        s.add_argument("--resume", action="store_true")
        s.set_defaults(fn=fn)

    s = sub.add_parser("synth", help="write a synthetic reference dataset")
    s.add_argument("name", choices=sorted(REFERENCE_SPECS))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
