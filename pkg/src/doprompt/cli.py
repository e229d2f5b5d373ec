"""Command-line surface: data generation, training, ablation sweeps, analysis.

Exit codes: 0 ok, 2 config problem, 3 numerical failure, 4 I/O or format
problem. All randomness flows from the seeds in the config (overridable with
--seed); outputs carry no timestamps, so identical invocations produce
byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import analysis, datagen, pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, VARIANTS, load_config
from .datagen import DataFormatError
from .pipeline import NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_FORMAT = 4

DEFAULT_LENGTHS = (2, 4, 8, 16, 32)


def _out_root(arg) -> Path:
    if arg:
        return Path(arg)
    return Path(os.environ.get("DOPROMPT_OUT", "runs"))


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _load_run_config(args) -> RunConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _load_or_generate_data(args, run: RunConfig) -> datagen.SyntheticDataset:
    if getattr(args, "data", None):
        path = Path(args.data)
        if not path.exists():
            raise DataFormatError(f"data path not found: {path}")
        return datagen.load_dataset(path)
    dc = run.data
    return datagen.generate_dataset(dc.num_domains, dc.per_domain_count, dc.data_seed)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    run = _load_run_config(args)
    dc = run.data
    dataset = datagen.generate_dataset(dc.num_domains, dc.per_domain_count, dc.data_seed)
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.dpd"
    datagen.save_dataset(path, dataset)
    sizes = [dataset.domain_size(d) for d in range(dataset.num_domains)]
    print(f"wrote {path}: {dataset.num_domains} domains x {sizes} images")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run_config(args)
    dataset = _load_or_generate_data(args, run)
    out = _out_root(args.out)
    report = pipeline.run_experiment(dataset, run.target_domain, run.variant, run, out_dir=out)
    print(
        f"variant={report['variant']} target={report['target_domain']} "
        f"seed={report['seed']} chosen_step={report['chosen_step']} "
        f"val_acc={report['val_acc']:.4f} test_acc={report['test_acc']:.4f}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _load_run_config(args)
    dataset = _load_or_generate_data(args, run)
    state = _load_state(args.checkpoint, run, dataset)
    accs = {}
    for d in range(dataset.num_domains):
        accs[f"domain_{d}"] = pipeline.evaluate_accuracy(
            state, dataset.images[d], dataset.labels[d], run.variant
        )
        print(f"domain {d}: accuracy {accs[f'domain_{d}']:.4f}")
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(accs, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


_WORKER_DATASET = None


def _ablate_worker(job):
    variant, target, seed, run, out_dir = job
    run = dataclasses.replace(run, train=dataclasses.replace(run.train, seed=seed))
    try:
        report = pipeline.run_experiment(_WORKER_DATASET, target, variant, run, out_dir=out_dir)
        return variant, target, seed, report["test_acc"], None
    except Exception as exc:  # recorded as a NaN cell by the caller
        return variant, target, seed, float("nan"), f"{type(exc).__name__}: {exc}"


def _run_jobs(jobs, workers: int):
    if workers <= 1:
        return [_ablate_worker(job) for job in jobs]
    with get_context("fork").Pool(workers) as pool:
        return pool.map(_ablate_worker, jobs)


def cmd_ablate(args) -> int:
    global _WORKER_DATASET
    run = _load_run_config(args)
    dataset = _load_or_generate_data(args, run)
    _WORKER_DATASET = dataset
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)

    seeds = [run.train.seed + i for i in range(args.num_seeds)]
    targets = list(range(dataset.num_domains))
    jobs = [
        (variant, target, seed, run, out / f"{variant}_t{target}_s{seed}")
        for variant in VARIANTS
        for target in targets
        for seed in seeds
    ]
    results = _run_jobs(jobs, args.workers)

    cells = {}
    failures = []
    for variant, target, seed, acc, err in results:
        cells.setdefault((variant, target), []).append(acc)
        if err is not None:
            failures.append(f"{variant} target={target} seed={seed}: {err}")

    header = ["variant"] + [f"target_{t}" for t in targets] + ["average"]
    lines = [",".join(header)]
    table = {}
    for variant in VARIANTS:
        row = [variant]
        means = []
        for target in targets:
            accs = np.array(cells[(variant, target)], dtype=float)
            mean, std = float(np.nanmean(accs)), float(np.nanstd(accs))
            means.append(mean)
            row.append(f"{100 * mean:.2f}±{100 * std:.2f}")
        avg = float(np.mean(means))
        row.append(f"{100 * avg:.2f}")
        lines.append(",".join(row))
        table[variant] = {"per_target": means, "average": avg}
    csv_path = out / "ablation.csv"
    csv_path.write_text("\n".join(lines) + "\n")
    (out / "ablation.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    print("\n".join(lines))
    if failures:
        print("failed runs:\n  " + "\n  ".join(failures), file=sys.stderr)
        return 1
    return EXIT_OK


def cmd_sweep_length(args) -> int:
    global _WORKER_DATASET
    run = _load_run_config(args)
    dataset = _load_or_generate_data(args, run)
    _WORKER_DATASET = dataset
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)

    lengths = [int(x) for x in args.lengths.split(",")] if args.lengths else list(DEFAULT_LENGTHS)
    if any(length <= 0 for length in lengths):
        raise ConfigError(f"prompt lengths must be positive, got {lengths}")
    seeds = [run.train.seed + i for i in range(args.num_seeds)]

    jobs = []
    for length in lengths:
        cfg_l = dataclasses.replace(run, train=dataclasses.replace(run.train, prompt_length=length))
        for seed in seeds:
            jobs.append((run.variant, run.target_domain, seed, cfg_l, out / f"L{length}_s{seed}"))
    results = _run_jobs(jobs, args.workers)

    by_length = {length: [] for length in lengths}
    for (variant, target, seed, acc, err), job in zip(results, jobs):
        length = job[3].train.prompt_length
        by_length[length].append(acc)
        if err is not None:
            print(f"L={length} seed={seed}: {err}", file=sys.stderr)

    lines = ["prompt_length,mean_test_acc"]
    for length in lengths:
        lines.append(f"{length},{100 * float(np.nanmean(by_length[length])):.2f}")
    (out / "length_sweep.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def _load_state(checkpoint_path, run: RunConfig, dataset) -> pipeline.ModelState:
    if checkpoint_path is None:
        raise ConfigError("--checkpoint is required for this mode")
    path = Path(checkpoint_path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    num_sources = dataset.num_domains - 1 if run.variant != "erm" else dataset.num_domains
    return pipeline.ModelState.load(path, run.vit, num_sources, run.train.prompt_length)


def _print_matrix(title, names, matrix) -> None:
    width = max(10, max(len(n) for n in names) + 2)
    print(title)
    print(" " * width + "".join(f"{n:>{width}}" for n in names))
    for name, row in zip(names, matrix):
        print(f"{name:>{width}}" + "".join(f"{v:>{width}.3f}" for v in row))


def cmd_analyze(args) -> int:
    run = _load_run_config(args)
    dataset = _load_or_generate_data(args, run)
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = args.mode

    if mode == "distance":
        if args.features == "pixels":
            feats = [dataset.images[d].reshape(dataset.domain_size(d), -1) for d in range(dataset.num_domains)]
        else:
            state = _load_state(args.checkpoint, run, dataset)
            feats = [pipeline.extract_features(state, dataset.images[d]) for d in range(dataset.num_domains)]
        labels = [dataset.labels[d] for d in range(dataset.num_domains)]
        report = analysis.domain_distance(feats, labels)
        names = [f"domain_{d}" for d in range(dataset.num_domains)]
        _print_matrix("normalized domain distance", names, report.domain_dist)
        _print_matrix("averaged class distance", names, report.class_dist)
        print(f"cross/in dist: {report.cross_in_ratio:.3f}  "
              f"cross/in class dist: {report.cross_in_class_ratio:.3f}")
        np.savetxt(out / "domain_distance.csv", report.domain_dist, delimiter=",", fmt="%.6f")
        np.savetxt(out / "class_distance.csv", report.class_dist, delimiter=",", fmt="%.6f")
        payload = {
            "domain_dist": report.domain_dist.tolist(),
            "class_dist": report.class_dist.tolist(),
            "in_dist": report.in_dist.tolist(),
            "cross_in_ratio": report.cross_in_ratio,
            "cross_in_class_ratio": report.cross_in_class_ratio,
        }
        (out / "distance.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    state = _load_state(args.checkpoint, run, dataset)
    if mode == "weights":
        eval_domains = list(range(dataset.num_domains))
        stats = analysis.adapter_weight_stats(state, dataset, eval_domains)
        names = [f"domain_{d}" for d in stats.eval_domains]
        src = [f"src_{s}" for s in stats.source_domains]
        print("argmax share (%)")
        print(" " * 12 + "".join(f"{n:>10}" for n in src))
        for name, row in zip(names, stats.percentages):
            print(f"{name:>12}" + "".join(f"{v:>10.1f}" for v in row))
        print("average weight")
        for name, row in zip(names, stats.averages):
            print(f"{name:>12}" + "".join(f"{v:>10.3f}" for v in row))
        np.savetxt(out / "adapter_percentages.csv", stats.percentages, delimiter=",", fmt="%.4f")
        np.savetxt(out / "adapter_averages.csv", stats.averages, delimiter=",", fmt="%.6f")
        payload = {
            "eval_domains": stats.eval_domains,
            "percentages": stats.percentages.tolist(),
            "averages": stats.averages.tolist(),
        }
        (out / "adapter_weights.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    if mode == "prompt-table":
        target = run.target_domain
        table = analysis.per_prompt_accuracy_table(
            state, dataset.images[target], dataset.labels[target]
        )
        lines = ["mode,accuracy"]
        for key, value in table.items():
            print(f"{key:>12}: {value:.2f}")
            lines.append(f"{key},{value:.4f}")
        (out / "prompt_table.csv").write_text("\n".join(lines) + "\n")
        (out / "prompt_table.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
        return EXIT_OK

    raise ConfigError(f"unknown analyze mode {mode!r}")


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doprompt",
        description="Domain-prompt learning experiments on a procedural multi-domain dataset.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="flat key=value config file")
        p.add_argument("--data", help="dataset file (.dpd) or directory of raw arrays")
        p.add_argument("--out", help="output directory (default $DOPROMPT_OUT or ./runs)")
        p.add_argument("--seed", type=int, help="override the training seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("gen-data", help="generate and cache the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one variant on one target domain")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every domain")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run all six variants over all target domains")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--num-seeds", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-length", help="accuracy across prompt lengths")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--num-seeds", type=int, default=1)
    p.add_argument("--lengths", help="comma-separated grid (default 2,4,8,16,32)")
    p.set_defaults(func=cmd_sweep_length)

    p = sub.add_parser("analyze", help="distance / adapter-weight / prompt-accuracy reports")
    common(p)
    p.add_argument("mode", choices=("distance", "weights", "prompt-table"))
    p.add_argument("--checkpoint")
    p.add_argument("--features", choices=("model", "pixels"), default="model")
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (CheckpointError, DataFormatError) as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
