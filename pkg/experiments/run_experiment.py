#!/usr/bin/env python3
"""
Main experiment runner for teacher training and distillation.
Usage: python experiments/run_experiment.py <command> [--config FILE] [--key value ...]
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

import rich
from tabulate import tabulate

from config import (DEFAULT_OUTPUT_DIR, LOG_LEVEL, ConfigError, ExperimentConfig, FIELD_TYPES,
                    config_fields, load_config, sweep_keys)
from experiments.artifacts import (SNAPSHOT_FILE, export_experts, load_banks, load_model, load_teacher,
                                   run_dir, save_run, save_teacher_cache, teacher_dir, write_eval,
                                   write_latency)
from experiments.report_generator import ExperimentReportGenerator
from experiments.trainer import distill, train_teacher
from services.dataset import (DatasetError, build_negative_pool, dataset_checksum, load_interactions,
                              write_manifest, write_planted_block_log)
from services.evaluation import bench_latency, evaluate
from services.gradcore import NumericalError

logger = logging.getLogger(__name__)

COMMANDS = ("prepare-data", "train-teacher", "distill", "evaluate", "bench-latency", "report", "export-experts")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# Keys already encoded in the run directory name
NAMED_KEYS = {"base_model", "method", "phi", "seed", "de_mode", "rrd_mode"}


def setup_logging(output_dir: str, command: str) -> None:
    log_dir = Path(output_dir) / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_dir / f"{command}.log"),
            logging.StreamHandler()
        ],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Distillation experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="Flat key = value config file")
        p.add_argument("--run-dir", help="Run directory (evaluate, bench-latency, export-experts)")
        if command == "prepare-data":
            p.add_argument("--synthetic", action="store_true", help="Write a planted-block log to data_path first")
            p.add_argument("--num-users", type=int, default=200)
            p.add_argument("--num-items", type=int, default=500)
            p.add_argument("--num-blocks", type=int, default=20)
        for f in config_fields():
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                           help=f"{FIELD_TYPES[f.name]} (default: {f.default})")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, str]:
    return {key[4:]: value for key, value in vars(args).items()
            if key.startswith("cfg_") and value is not None}


def run_directory(cfg: ExperimentConfig, keys: List[str]) -> Path:
    """Run directory of ``cfg``; swept keys not in the name are appended."""
    extra = [k for k in keys if k not in NAMED_KEYS]
    directory = run_dir(cfg)
    if extra:
        directory = directory.with_name(directory.name + "".join(f"_{k}{getattr(cfg, k)}" for k in extra))
    return directory


def load_dataset(cfg: ExperimentConfig):
    if not cfg.data_path:
        raise ConfigError("data_path is required")
    if not Path(cfg.data_path).exists():
        raise DatasetError(f"dataset not found: {cfg.data_path}")
    dataset = load_interactions(cfg.data_path, cfg.min_user_interactions, cfg.min_item_interactions)
    pool = build_negative_pool(dataset, cfg.seed, cfg.eval_repeats, cfg.eval_negatives)
    return dataset, pool


def print_metrics(title: str, report) -> None:
    rich.print(f"\n📊 [bold]{title}[/bold]")
    rows = [[f"@{n}"] + [report.mean(m, n) for m in ("H", "M", "N")] for n in (5, 10, 20)]
    print(tabulate(rows, headers=["cutoff", "H", "M", "N"], floatfmt=".4f"))


def cmd_prepare_data(cfg: ExperimentConfig, args) -> None:
    if args.synthetic:
        path = cfg.data_path or str(Path(cfg.output_dir) / "synthetic.tsv")
        write_planted_block_log(path, num_users=args.num_users, num_items=args.num_items,
                                num_blocks=args.num_blocks, seed=cfg.seed)
        cfg = cfg.with_overrides({"data_path": path})
    dataset, _ = load_dataset(cfg)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    summary = write_manifest(dataset, Path(cfg.output_dir) / "manifest.txt", source=cfg.data_path)
    rich.print("\n📦 [bold]Dataset prepared[/bold]")
    print(tabulate(list(summary.items()), headers=["field", "value"]))


def cmd_train_teacher(cfg: ExperimentConfig, args) -> None:
    dataset, pool = load_dataset(cfg)
    result, snapshot = train_teacher(cfg, dataset, pool)
    directory = teacher_dir(cfg)
    save_run(directory, cfg, result, snapshot.checksum, role="teacher")
    save_teacher_cache(directory, snapshot)
    report = evaluate(result.model, dataset, pool, "test")
    write_eval(directory, result.validation, "teacher", 1.0)
    write_eval(directory, report, "teacher", 1.0)
    rich.print(f"✅ Teacher saved to {directory} (best epoch {result.best_epoch})")
    print_metrics("Teacher test metrics", report)


def cmd_distill(cfg: ExperimentConfig, args, directory: Path) -> None:
    dataset, pool = load_dataset(cfg)
    teacher = load_teacher(cfg, dataset) if cfg.method != "none" else None
    result = distill(cfg, teacher, dataset, pool)
    save_run(directory, cfg, result, dataset_checksum(dataset))
    report = evaluate(result.model, dataset, pool, "test")
    write_eval(directory, result.validation, cfg.method_label, cfg.phi)
    write_eval(directory, report, cfg.method_label, cfg.phi)
    if result.banks:
        export_experts(directory, result.banks, teacher, dataset)
    rich.print(f"✅ Student saved to {directory} (best epoch {result.best_epoch})")
    print_metrics(f"{cfg.method_label} test metrics", report)


def cmd_evaluate(cfg: ExperimentConfig, args, directory: Path) -> None:
    dataset, pool = load_dataset(cfg)
    header, model = load_model(directory / SNAPSHOT_FILE, dataset)
    method = header.get("method", cfg.method_label)
    phi = header.get("phi", cfg.phi)
    for phase in ("validation", "test"):
        report = evaluate(model, dataset, pool, phase)
        write_eval(directory, report, method, phi)
    print_metrics(f"{directory.name} test metrics", report)


def cmd_bench_latency(cfg: ExperimentConfig, args, directory: Path) -> None:
    dataset, pool = load_dataset(cfg)
    _, model = load_model(directory / SNAPSHOT_FILE, dataset)
    h5 = evaluate(model, dataset, pool, "test").mean("H", 5)
    teacher_h5 = None
    teacher_path = teacher_dir(cfg) / SNAPSHOT_FILE
    if teacher_path.exists():
        _, teacher_model = load_model(teacher_path, dataset)
        teacher_h5 = evaluate(teacher_model, dataset, pool, "test").mean("H", 5)
    else:
        logger.warning(f"No teacher at {teacher_path}; H@5 ratio left undefined")
    report = bench_latency(model, dataset, cfg.latency_repeats, teacher_h5=teacher_h5, h5=h5)
    write_latency(directory, report)
    rich.print(f"⏱️  {directory.name}: {report.wall_time:.4f}s, {report.param_count:,} params, "
               f"H@5 ratio {report.h5_ratio:.3f}")


def cmd_report(cfg: ExperimentConfig, args) -> None:
    generator = ExperimentReportGenerator(cfg.output_dir)
    files = generator.save_reports()
    print(Path(files["text"]).read_text(encoding="utf-8"))
    rich.print(f"\n📁 Reports written to {Path(files['text']).parent}")


def cmd_export_experts(cfg: ExperimentConfig, args, directory: Path) -> None:
    dataset, _ = load_dataset(cfg)
    teacher = load_teacher(cfg, dataset)
    banks = load_banks(directory)
    if not banks:
        raise ConfigError(f"{directory} holds no trained experts")
    for path in export_experts(directory, banks, teacher, dataset):
        rich.print(f"🧩 {path}")


def run(args) -> None:
    overrides = collect_overrides(args)
    configs = load_config(args.config, overrides)
    keys = sweep_keys(configs)
    if len(configs) > 1:
        logger.info(f"Sweep over {keys}: {len(configs)} configurations, run serially")
    for cfg in configs:
        directory = Path(args.run_dir) if args.run_dir else run_directory(cfg, keys)
        if args.command == "prepare-data":
            cmd_prepare_data(cfg, args)
        elif args.command == "train-teacher":
            cmd_train_teacher(cfg, args)
        elif args.command == "distill":
            cmd_distill(cfg, args, directory)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args, directory)
        elif args.command == "bench-latency":
            cmd_bench_latency(cfg, args, directory)
        elif args.command == "export-experts":
            cmd_export_experts(cfg, args, directory)
        elif args.command == "report":
            cmd_report(cfg, args)
            break


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    setup_logging(getattr(args, "cfg_output_dir", None) or DEFAULT_OUTPUT_DIR, args.command)
    try:
        run(args)
    except NumericalError as e:
        logger.error(f"Numerical abort: {e}")
        rich.print(f"\n❌ Numerical abort: {e}")
        return EXIT_NUMERICAL
    except (ConfigError, DatasetError) as e:
        logger.error(f"{e.__class__.__name__}: {e}")
        rich.print(f"\n❌ {e.__class__.__name__}: {e}")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
