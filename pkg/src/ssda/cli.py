"""Command-line entry points.

Verbs: ``generate`` (synthetic benchmark files), ``train`` (one experiment),
``ablate`` (preset x seed x shot matrix), ``eval`` (checkpoint accuracy and
pseudo-label diagnostics), ``inspect`` (checkpoint summary).

Exit codes are a stable contract: 0 success, 2 configuration error,
3 training fault, 4 artifact corruption.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import multiprocessing
import sys
from pathlib import Path

import numpy as np

from . import figures
from .config import ConfigError, resolve_config
from .data import DatasetError, ShiftSpec, write_benchmark_files
from .metrics import PRESET_ORDER, accuracy, compare_runs, pseudo_label_report
from .model import CheckpointError, TrainingFault, load_params
from .training import (
    MetricsRow,
    PRESETS,
    TrainConfig,
    apply_preset,
    build_benchmark_from_config,
    config_to_dict,
    load_checkpoint,
    run_experiment,
    sample_anchors,
    write_metrics_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_CORRUPT = 4


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_run_outputs(report, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.canonical_json())
    write_metrics_csv([MetricsRow.from_dict(d) for d in report.history], out_dir / "metrics.csv")
    # volatile timing lives outside the deterministic report
    _write_json(out_dir / "timing.json", {"wall_clock_seconds": report.wall_clock_seconds})
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    figures.save_training_curves(report.history, fig_dir / "training_curves.png")
    figures.save_pseudo_label_series(report.pseudo_label_series, fig_dir / "pseudo_labels.png")


def cmd_generate(args) -> int:
    spec = ShiftSpec(
        num_classes=args.classes,
        input_dim=args.dim,
        samples_per_class_source=args.source_per_class,
        samples_per_class_target=args.target_per_class,
        shift_kind=args.shift_kind,
        shift_magnitude=args.shift_magnitude,
        cluster_spread=args.cluster_spread,
        seed=args.seed,
    )
    problems = spec.problems()
    if problems:
        raise ConfigError(problems)
    out = Path(args.out)
    write_benchmark_files(spec, out)
    for name in ("source.csv", "target.csv", "manifest.json"):
        print(out / name)
    return EXIT_OK


def _resolved_config(args) -> TrainConfig:
    config = resolve_config(args.config, args.set)
    if config.preset != "custom":
        config = apply_preset(config, config.preset)
    return config


def cmd_train(args) -> int:
    config = _resolved_config(args)
    if args.dry_run:
        print(json.dumps(config_to_dict(config), indent=2, sort_keys=True))
        return EXIT_OK
    out = Path(args.out)
    if config.checkpoint_dir is None:
        config = dataclasses.replace(config, checkpoint_dir=str(out / "checkpoints"))
    report = run_experiment(config)
    _write_run_outputs(report, out)
    print(f"stage1 target accuracy: {report.stage1_target_accuracy:.1f}")
    if report.stage2_student_target_accuracy is not None:
        print(f"stage2 student target accuracy: {report.stage2_student_target_accuracy:.1f}")
        print(f"stage2 teacher target accuracy: {report.stage2_teacher_target_accuracy:.1f}")
    print(f"final ({report.eval_model}) target accuracy: {report.final_target_accuracy:.1f}")
    print(out / "report.json")
    return EXIT_OK


def _one_ablation_run(task) -> tuple:
    preset, shot, seed, base_config, out_dir = task
    config = apply_preset(base_config, preset)
    config = dataclasses.replace(config, seed=seed, k_shot=shot, checkpoint_dir=None)
    run_dir = Path(out_dir) / "runs" / f"{preset}_{shot}shot_seed{seed}"
    try:
        report = run_experiment(config)
    except Exception as exc:  # recorded in the table; other runs proceed
        return (preset, shot, seed, None, f"{type(exc).__name__}: {exc}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "report.json").write_text(report.canonical_json())
    write_metrics_csv([MetricsRow.from_dict(d) for d in report.history], run_dir / "metrics.csv")
    return (preset, shot, seed, report, None)


def cmd_ablate(args) -> int:
    base = _resolved_config(args)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    unknown = [p for p in presets if p not in PRESETS]
    if unknown:
        raise ConfigError([f"unknown preset {p!r}; choose from {sorted(PRESETS)}" for p in unknown])
    seeds = []
    for token in args.seeds.split(","):
        token = token.strip()
        if token:
            try:
                seeds.append(int(token))
            except ValueError:
                raise ConfigError([f"bad seed {token!r} in --seeds"]) from None
    if not presets or not seeds:
        raise ConfigError(["ablate needs at least one preset and one seed"])
    shots = {"1": [1], "3": [3], "both": [1, 3]}[args.shots]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(preset, shot, seed, base, str(out))
             for preset in presets for shot in shots for seed in seeds]
    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            results = pool.map(_one_ablation_run, tasks)
    else:
        results = [_one_ablation_run(t) for t in tasks]

    reports = [r for (_, _, _, r, _) in results if r is not None]
    failures = [(p, s, sd, err) for (p, s, sd, r, err) in results if r is None]
    for preset, shot, seed, err in failures:
        print(f"run failed: {preset} {shot}-shot seed {seed}: {err}", file=sys.stderr)
    table = compare_runs(reports, failures)
    (out / "ablation.csv").write_text(table.to_csv_text())
    text = table.to_table_text()
    (out / "ablation.txt").write_text(text)
    figures.save_ablation_chart(table, out / "ablation.png")
    print(text, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _resolved_config(args)
    try:
        state = load_checkpoint(args.checkpoint)
        params = state.teacher if (args.model == "teacher" and state.teacher is not None) else state.student
    except CheckpointError:
        params, _meta = load_params(args.checkpoint)  # bare parameter file fallback
    benchmark = build_benchmark_from_config(config)
    benchmark = sample_anchors(benchmark, config.k_shot, config.seed)
    mu = args.mu if args.mu is not None else config.hyper.mu
    acc = accuracy(params, benchmark.heldout)
    stats = pseudo_label_report(params, benchmark.split.target_unlabeled.samples,
                                benchmark.eval_labels, mu)
    print(f"target accuracy: {acc:.1f}")
    print(f"pseudo-label stats at mu={mu}:")
    for key, value in stats.to_dict().items():
        print(f"  {key}: {value}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "eval.json", {"target_accuracy": acc, "pseudo_label_stats": stats.to_dict()})
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    try:
        state = load_checkpoint(path)
        print(f"checkpoint: {path}")
        print(f"stage: {state.stage}")
        print(f"iteration: {state.iteration}")
        print(f"config_hash: {state.config_hash}")
        print(f"seed: {state.seed}")
        blocks = [("student", state.student)]
        if state.teacher is not None:
            blocks.append(("teacher", state.teacher))
        for name, params in blocks:
            arch = params.arch
            print(f"{name}: arch {arch.input_dim} -> {list(arch.hidden_dims)} -> {arch.num_classes}")
            for k, (W, b) in enumerate(params.layers):
                print(f"  layer {k}: |W| = {np.linalg.norm(W):.6f}  |b| = {np.linalg.norm(b):.6f}")
        return EXIT_OK
    except CheckpointError:
        pass
    params, meta = load_params(path)  # raises CheckpointError -> exit 4
    arch = params.arch
    print(f"parameter file: {path}")
    for key in ("stage", "iteration", "config_hash", "seed"):
        if key in meta:
            print(f"{key}: {meta[key]}")
    print(f"arch: {arch.input_dim} -> {list(arch.hidden_dims)} -> {arch.num_classes}")
    for k, (W, b) in enumerate(params.layers):
        print(f"  layer {k}: |W| = {np.linalg.norm(W):.6f}  |b| = {np.linalg.norm(b):.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssda", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic benchmark (CSV files + manifest)")
    gen.add_argument("--out", required=True)
    gen.add_argument("--classes", type=int, default=4)
    gen.add_argument("--dim", type=int, default=16)
    gen.add_argument("--source-per-class", type=int, default=500)
    gen.add_argument("--target-per-class", type=int, default=500)
    gen.add_argument("--shift-kind", default="rotation",
                     choices=["rotation", "translation", "scale", "mixed"])
    gen.add_argument("--shift-magnitude", type=float, default=0.9)
    gen.add_argument("--cluster-spread", type=float, default=0.6)
    gen.add_argument("--seed", type=int, default=0)
    gen.set_defaults(func=cmd_generate)

    def add_config_flags(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable, dotted keys)")

    train = sub.add_parser("train", help="run one experiment and write its report")
    add_config_flags(train)
    train.add_argument("--out", default="run")
    train.add_argument("--dry-run", action="store_true",
                       help="validate and print the resolved config without training")
    train.set_defaults(func=cmd_train)

    ablate = sub.add_parser("ablate", help="run the preset x seed x shot matrix")
    add_config_flags(ablate)
    ablate.add_argument("--out", default="ablation")
    ablate.add_argument("--presets", default=",".join(PRESET_ORDER))
    ablate.add_argument("--seeds", default="1,2,3,4,5")
    ablate.add_argument("--shots", choices=["1", "3", "both"], default="both")
    ablate.add_argument("--jobs", type=int, default=1,
                        help="parallel runs (each owns its output directory)")
    ablate.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the configured benchmark")
    add_config_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--model", choices=["student", "teacher"], default="student")
    ev.add_argument("--mu", type=float, default=None)
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=cmd_eval)

    ins = sub.add_parser("inspect", help="print a checkpoint summary")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        for message in exc.errors:
            print(f"config error: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingFault as exc:
        where = f" (iteration {exc.iteration})" if exc.iteration is not None else ""
        print(f"training fault: {exc}{where}", file=sys.stderr)
        return EXIT_TRAINING
    except (CheckpointError, DatasetError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except FileNotFoundError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
