#!/usr/bin/env python3
"""
Desk-scale directional check of distillation on a planted-block dataset.
Trains one teacher, then a plain student and every distillation method over
several seeds, and checks the direction of the H@5 and latency results.
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import argparse
import logging
from pathlib import Path

import numpy as np
import rich

from config import ExperimentConfig
from experiments.artifacts import save_run, save_teacher_cache, write_eval, write_latency
from experiments.report_generator import ExperimentReportGenerator
from experiments.trainer import distill, train_teacher
from services.dataset import build_negative_pool, dataset_checksum, load_interactions, write_planted_block_log
from services.evaluation import bench_latency, evaluate, paired_ttest
from models import param_count

METHODS = ("none", "rd", "cd", "de", "rrd", "de-rrd")

# Weight key tuned for each single-term method
WEIGHT_KEYS = {"rd": "lambda_kd", "cd": "lambda_kd", "de": "lambda_de", "rrd": "lambda_rrd"}

logger = logging.getLogger(__name__)


def select_weights(base: ExperimentConfig, teacher, dataset, pool, grid, rd_warmup: str):
    """
    Pick each method's distillation weight by seed-0 validation H@5.

    Returns:
        (overrides per method, best seed-0 result per single-term method)
    """
    overrides = {"none": {}}
    best_results = {}
    for method, key in WEIGHT_KEYS.items():
        best = None
        for value in grid:
            values = {"method": method, key: value}
            if method == "rd":
                values["rd_warmup_epochs"] = rd_warmup
            cfg = base.with_overrides(values).validate()
            result = distill(cfg, teacher, dataset, pool)
            val_h5 = result.validation.mean("H", 5)
            ratio = float(result.history["kd_ratio"].mean())
            logger.info(f"Weight search {method} {key}={value}: val_H@5={val_h5:.4f} kd/base={ratio:.3f}")
            if best is None or val_h5 > best[0]:
                best = (val_h5, values, result)
        overrides[method] = best[1]
        best_results[method] = best[2]
        rich.print(f"  {method:7s} {key}={best[1][key]} (val H@5 {best[0]:.4f})")
    overrides["de-rrd"] = {"method": "de-rrd", "lambda_de": overrides["de"]["lambda_de"],
                           "lambda_rrd": overrides["rrd"]["lambda_rrd"]}
    return overrides, best_results


def main():
    """Run the check; exits non-zero when a direction does not hold."""
    parser = argparse.ArgumentParser(
        description="Directional distillation check on synthetic data",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Full check (5 seeds)
  python scripts/run_directional_check.py --output-dir runs/directional

  # Quick smoke run
  python scripts/run_directional_check.py --seeds 2 --epochs 20
        """
    )
    parser.add_argument("--output-dir", default="runs/directional")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--patience", type=int, default=30)
    parser.add_argument("--teacher-dim", type=int, default=64)
    parser.add_argument("--phi", type=float, default=0.1)
    parser.add_argument("--lambda-grid", default="1e-1,1e-2,1e-3,1e-4",
                        help="Weights tried for each distillation term on seed 0")
    args = parser.parse_args()

    output = Path(args.output_dir)
    (output / "logs").mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(output / "logs" / "directional_check.log"),
            logging.StreamHandler()
        ]
    )

    print("=" * 60)
    print("DIRECTIONAL DISTILLATION CHECK")
    print("=" * 60)

    data_path = write_planted_block_log(output / "planted.tsv", num_users=200, num_items=500, num_blocks=20)
    dataset = load_interactions(data_path)
    checksum = dataset_checksum(dataset)

    base = ExperimentConfig().with_overrides({
        "data_path": str(data_path),
        "output_dir": str(output),
        "base_model": "bpr",
        "teacher_dim": str(args.teacher_dim),
        "phi": str(args.phi),
        "epochs": str(args.epochs),
        "patience": str(args.patience),
        "seed": "0",
    })
    # Warm-up must stay shorter than training
    rd_warmup = str(min(30, max(1, args.epochs // 3)))

    pool0 = build_negative_pool(dataset, 0)
    teacher_result, teacher = train_teacher(base.validate(), dataset, pool0)
    teacher_dir = output / base.teacher_run_name
    save_run(teacher_dir, base, teacher_result, checksum, role="teacher")
    save_teacher_cache(teacher_dir, teacher)
    teacher_report = evaluate(teacher_result.model, dataset, pool0, "test")
    write_eval(teacher_dir, teacher_report, "teacher", 1.0)
    rich.print(f"🎓 Teacher H@5 = {teacher_report.mean('H', 5):.4f}")

    rich.print("🔎 Selecting distillation weights on seed 0 validation H@5")
    grid = [v.strip() for v in args.lambda_grid.split(",") if v.strip()]
    selected, tuned = select_weights(base, teacher, dataset, pool0, grid, rd_warmup)

    h5 = {m: [] for m in METHODS}
    students = {}
    for seed in range(args.seeds):
        pool = build_negative_pool(dataset, seed)
        for method in METHODS:
            overrides = {"method": method, **selected[method], "seed": str(seed)}
            cfg = base.with_overrides(overrides).validate()
            if seed == 0 and method in tuned:
                result = tuned[method]
            else:
                result = distill(cfg, teacher if method != "none" else None, dataset, pool)
            directory = output / cfg.run_name
            save_run(directory, cfg, result, checksum)
            report = evaluate(result.model, dataset, pool, "test")
            write_eval(directory, report, cfg.method_label, cfg.phi)
            h5[method].append(report.mean("H", 5))
            if seed == 0 and method == "none":
                students[seed] = (directory, result.model)
            rich.print(f"  seed {seed} {method:7s} H@5 = {h5[method][-1]:.4f}")

    directory, student_model = students[0]
    student_latency = bench_latency(student_model, dataset, repeats=3, h5=h5["none"][0],
                                    teacher_h5=teacher_report.mean("H", 5))
    teacher_latency = bench_latency(teacher_result.model, dataset, repeats=3)
    write_latency(directory, student_latency)
    write_latency(teacher_dir, teacher_latency)

    ExperimentReportGenerator(str(output)).save_reports()

    checks = []
    means = {m: float(np.mean(v)) for m, v in h5.items()}
    p_value = paired_ttest(h5["de-rrd"], h5["none"]) if args.seeds >= 2 else float("nan")
    checks.append(("DE-RRD beats the plain student (p <= 0.05)",
                   means["de-rrd"] > means["none"] and p_value <= 0.05))
    stderr = float(np.std(h5["de-rrd"], ddof=1) / np.sqrt(args.seeds)) if args.seeds >= 2 else 0.0
    for method in ("rd", "cd", "de", "rrd"):
        checks.append((f"DE-RRD >= {method.upper()} or within one standard error",
                       means["de-rrd"] >= means[method] - stderr))
    checks.append(("Student ranks faster than the teacher", student_latency.wall_time < teacher_latency.wall_time))
    ratio = param_count(student_model) / param_count(teacher_result.model)
    checks.append((f"Parameter ratio {ratio:.4f} matches phi", abs(ratio - args.phi) <= 0.5 / args.teacher_dim + 1e-9))

    print("\n" + "=" * 60)
    for name, ok in checks:
        rich.print(f"{'✅' if ok else '❌'} {name}")
    rich.print("Mean H@5: " + ", ".join(f"{m}={v:.4f}" for m, v in means.items()) + f" (p={p_value:.4g})")
    rich.print("Weights: " + ", ".join(f"{m}: {k}={selected[m][k]}" for m, k in WEIGHT_KEYS.items()))
    print("=" * 60)
    return 0 if all(ok for _, ok in checks) else 1


if __name__ == "__main__":
    sys.exit(main())
