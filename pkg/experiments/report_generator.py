#!/usr/bin/env python3
"""
Report generator for distillation runs.
Merges every run directory under an output directory into summary tables,
improvement columns, paired significance tests and expert usage counts.
"""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tabulate import tabulate

from experiments.artifacts import CONFIG_FILE, LATENCY_FILE, SNAPSHOT_FILE
from services.evaluation import CUTOFFS, METRICS, paired_ttest
from services.snapshot import SnapshotError, read_header

logger = logging.getLogger(__name__)

METRIC_COLUMNS = [f"{m}@{n}" for n in CUTOFFS for m in METRICS]
GROUP_KEYS = ["base_model", "role", "method", "phi"]
BASELINES = ("rd", "cd")


def _per_user_h5(hits: pd.DataFrame) -> pd.Series:
    hit = hits["position"].between(1, 5).astype(float)
    return hit.groupby(hits["user"]).mean()


class ExperimentReportGenerator:
    """Builds consolidated tables from the run directories of one output directory."""

    def __init__(self, output_dir: str):
        """
        Args:
            output_dir: Directory holding one sub-directory per run
        """
        self.output_dir = Path(output_dir)
        self.runs: List[Dict[str, object]] = []
        self.hits: Dict[str, pd.Series] = {}
        self.missing: List[str] = []
        self.expert_usage = pd.DataFrame()

    def collect(self) -> pd.DataFrame:
        """Read every run; runs without a snapshot or test evaluation are listed as missing."""
        self.runs, self.hits, self.missing = [], {}, []
        usage = []
        for directory in sorted(p for p in self.output_dir.iterdir() if p.is_dir()) if self.output_dir.exists() else []:
            if not (directory / CONFIG_FILE).exists():
                continue
            eval_path = directory / "eval_test.csv"
            try:
                header = read_header(directory / SNAPSHOT_FILE)
            except (SnapshotError, OSError) as e:
                self.missing.append(f"{directory.name}: no usable snapshot ({e})")
                continue
            if not eval_path.exists():
                self.missing.append(f"{directory.name}: not evaluated")
                continue

            row = {
                "run": directory.name,
                "base_model": header["base_model"],
                "role": header.get("role", "student"),
                "method": header.get("method", "none"),
                "phi": header.get("phi", 1.0),
                "seed": header.get("seed"),
                "best_epoch": header.get("best_epoch"),
            }
            frame = pd.read_csv(eval_path)
            means = frame.groupby(["metric", "cutoff"])["value"].mean()
            for metric in METRICS:
                for cutoff in CUTOFFS:
                    row[f"{metric}@{cutoff}"] = float(means.get((metric, cutoff), np.nan))

            latency_path = directory / LATENCY_FILE
            if latency_path.exists():
                with open(latency_path) as f:
                    latency = json.load(f)
                row.update({"wall_time": latency["wall_time"], "param_count": latency["param_count"],
                            "h5_ratio": latency["h5_ratio"]})
            self.runs.append(row)

            hits_path = directory / "hits_test.csv"
            if hits_path.exists():
                self.hits[directory.name] = _per_user_h5(pd.read_csv(hits_path))

            for expert_file in sorted(directory.glob("experts_*.csv")):
                experts = pd.read_csv(expert_file)
                counts = experts.groupby(["entity_type", "expert"]).size().reset_index(name="entities")
                counts.insert(0, "run", directory.name)
                usage.append(counts)

        for note in self.missing:
            logger.warning(f"Missing run: {note}")
        self.expert_usage = pd.concat(usage, ignore_index=True) if usage else pd.DataFrame(
            columns=["run", "entity_type", "expert", "entities"])
        return pd.DataFrame(self.runs)

    def method_summary(self, runs: pd.DataFrame) -> pd.DataFrame:
        """
        Mean over seeds per (base model, role, method, phi).

        ``improv_<metric>`` is the gain over the plain student; ``improvb_<metric>``
        is the gain of every non-baseline method over the better of RD and CD by H@5.
        """
        if runs.empty:
            return runs
        numeric = [c for c in METRIC_COLUMNS + ["wall_time", "param_count", "h5_ratio"] if c in runs]
        summary = runs.groupby(GROUP_KEYS, dropna=False)[numeric].mean().reset_index()
        summary["seeds"] = runs.groupby(GROUP_KEYS, dropna=False).size().to_numpy()

        for metric in METRIC_COLUMNS:
            summary[f"improv_{metric}"] = np.nan
        for metric in METRIC_COLUMNS:
            summary[f"improvb_{metric}"] = np.nan
        summary["best_baseline"] = None
        for idx, row in summary.iterrows():
            if row["role"] != "student" or row["method"] == "none":
                continue
            base = self._reference(summary, row, "none")
            if base is not None:
                for metric in METRIC_COLUMNS:
                    reference = base[metric]
                    if reference:
                        summary.loc[idx, f"improv_{metric}"] = (row[metric] - reference) / reference
            if row["method"] in BASELINES:
                continue
            best = self.best_baseline(summary, row["base_model"], row["phi"])
            if best is None:
                continue
            summary.loc[idx, "best_baseline"] = best
            reference_row = self._reference(summary, row, best)
            for metric in METRIC_COLUMNS:
                reference = reference_row[metric]
                if reference:
                    summary.loc[idx, f"improvb_{metric}"] = (row[metric] - reference) / reference
        return summary

    @staticmethod
    def _reference(summary: pd.DataFrame, row, method: str) -> Optional[pd.Series]:
        match = summary[(summary["base_model"] == row["base_model"]) & (summary["role"] == "student")
                        & (summary["method"] == method) & (summary["phi"] == row["phi"])]
        return None if match.empty else match.iloc[0]

    @staticmethod
    def best_baseline(frame: pd.DataFrame, base_model: str, phi: float) -> Optional[str]:
        """The competing baseline (RD or CD) with the highest mean H@5; ties go to the first listed."""
        candidates = frame[(frame["base_model"] == base_model) & (frame["phi"] == phi)
                           & (frame["role"] == "student") & (frame["method"].isin(BASELINES))]
        if candidates.empty:
            return None
        means = candidates.groupby("method")["H@5"].mean()
        ordered = [m for m in BASELINES if m in means.index]
        return max(ordered, key=lambda m: means[m])

    def _paired_users(self, run_name: str, ref_name: str) -> float:
        if run_name in self.hits and ref_name in self.hits:
            a, b = self.hits[run_name].align(self.hits[ref_name], join="inner")
            if len(a) >= 2:
                return paired_ttest(a.to_numpy(), b.to_numpy())
        return np.nan

    def significance(self, runs: pd.DataFrame) -> pd.DataFrame:
        """
        Paired t-tests against the plain student of the same base model, phi and seed.

        ``p_users`` pairs per-user repeat-averaged H@5 within a seed;
        ``p_seeds`` pairs mean H@5 across seeds. Methods other than the
        baselines are also tested against the best baseline of their base
        model and phi (``p_vs_best`` per user, ``p_seeds_vs_best`` across seeds).
        """
        rows = []
        if runs.empty:
            return pd.DataFrame(rows)
        students = runs[runs["role"] == "student"]
        for _, run in students[students["method"] != "none"].iterrows():
            same_seed = students[(students["base_model"] == run["base_model"]) & (students["phi"] == run["phi"])
                                 & (students["seed"] == run["seed"])]
            match = same_seed[same_seed["method"] == "none"]
            if match.empty:
                continue
            ref = match.iloc[0]
            best, p_vs_best = None, np.nan
            if run["method"] not in BASELINES:
                best = self.best_baseline(students, run["base_model"], run["phi"])
                rival = same_seed[same_seed["method"] == best] if best else same_seed.iloc[0:0]
                if not rival.empty:
                    p_vs_best = self._paired_users(run["run"], rival.iloc[0]["run"])
            rows.append({"base_model": run["base_model"], "method": run["method"], "phi": run["phi"],
                         "seed": run["seed"], "p_users": self._paired_users(run["run"], ref["run"]),
                         "delta_H@5": run["H@5"] - ref["H@5"], "best_baseline": best,
                         "p_vs_best": p_vs_best})
        frame = pd.DataFrame(rows)
        if frame.empty:
            return frame

        seed_level = []
        mine = students.set_index(["base_model", "method", "phi", "seed"])["H@5"]
        for (base_model, method, phi), group in frame.groupby(["base_model", "method", "phi"]):
            if len(group) < 2:
                continue
            a = [mine[(base_model, method, phi, s)] for s in group["seed"]]
            b = [mine[(base_model, "none", phi, s)] for s in group["seed"]]
            entry = {"base_model": base_model, "method": method, "phi": phi,
                     "p_seeds": paired_ttest(a, b), "p_seeds_vs_best": np.nan}
            best = group["best_baseline"].iloc[0]
            if isinstance(best, str) and all((base_model, best, phi, s) in mine.index for s in group["seed"]):
                c = [mine[(base_model, best, phi, s)] for s in group["seed"]]
                entry["p_seeds_vs_best"] = paired_ttest(a, c)
            seed_level.append(entry)
        if seed_level:
            frame = frame.merge(pd.DataFrame(seed_level), on=["base_model", "method", "phi"], how="left")
        else:
            frame["p_seeds"] = np.nan
            frame["p_seeds_vs_best"] = np.nan
        return frame

    def generate_text_report(self, runs: pd.DataFrame, summary: pd.DataFrame, tests: pd.DataFrame) -> str:
        """Human-readable report; contains no timestamps so re-runs are byte-identical."""
        lines = ["=" * 80, "DISTILLATION EXPERIMENTS - SUMMARY", "=" * 80, ""]
        lines.append(f"Output directory: {self.output_dir}")
        lines.append(f"Completed runs: {len(runs)}")
        lines.append("")
        if not summary.empty:
            cols = GROUP_KEYS + ["seeds"] + METRIC_COLUMNS
            lines.append("TEST METRICS (mean over seeds):")
            lines.append(tabulate(summary[cols], headers="keys", tablefmt="github", showindex=False, floatfmt=".4f"))
            lines.append("")
            improv = [c for c in summary.columns if c.startswith("improv_")]
            shown = summary[summary[improv].notna().any(axis=1)] if improv else summary.iloc[0:0]
            if not shown.empty:
                lines.append("IMPROV.S (relative to the plain student):")
                lines.append(tabulate(shown[GROUP_KEYS + improv], headers="keys", tablefmt="github",
                                      showindex=False, floatfmt=".2%"))
                lines.append("")
            improvb = [c for c in summary.columns if c.startswith("improvb_")]
            shown = summary[summary[improvb].notna().any(axis=1)] if improvb else summary.iloc[0:0]
            if not shown.empty:
                lines.append("IMPROV.B (relative to the best of RD and CD):")
                lines.append(tabulate(shown[GROUP_KEYS + ["best_baseline"] + improvb], headers="keys",
                                      tablefmt="github", showindex=False, floatfmt=".2%"))
                lines.append("")
            if "wall_time" in summary:
                lines.append("INFERENCE LATENCY:")
                lines.append(tabulate(summary[GROUP_KEYS + ["wall_time", "param_count", "h5_ratio"]],
                                      headers="keys", tablefmt="github", showindex=False, floatfmt=".4f"))
                lines.append("")
        if not tests.empty:
            lines.append("PAIRED T-TESTS ON H@5 (vs plain student and best baseline):")
            lines.append(tabulate(tests, headers="keys", tablefmt="github", showindex=False, floatfmt=".4g"))
            lines.append("")
        if not self.expert_usage.empty:
            lines.append("EXPERT USAGE (entities per argmax expert):")
            lines.append(tabulate(self.expert_usage, headers="keys", tablefmt="github", showindex=False))
            lines.append("")
        if self.missing:
            lines.append("MISSING RUNS:")
            lines.extend(f"- {note}" for note in self.missing)
            lines.append("")
        return "\n".join(lines)

    def save_reports(self, report_dir: Optional[str] = None) -> Dict[str, str]:
        """
        Write runs.csv, summary.csv, ttests.csv, expert_usage.csv and report.txt.

        Returns:
            Mapping of report name to file path
        """
        report_dir = Path(report_dir) if report_dir else self.output_dir / "report"
        report_dir.mkdir(parents=True, exist_ok=True)
        runs = self.collect()
        summary = self.method_summary(runs)
        tests = self.significance(runs)

        files = {
            "runs": report_dir / "runs.csv",
            "summary": report_dir / "summary.csv",
            "ttests": report_dir / "ttests.csv",
            "expert_usage": report_dir / "expert_usage.csv",
            "text": report_dir / "report.txt",
        }
        runs.to_csv(files["runs"], index=False)
        summary.to_csv(files["summary"], index=False)
        tests.to_csv(files["ttests"], index=False)
        self.expert_usage.to_csv(files["expert_usage"], index=False)
        files["text"].write_text(self.generate_text_report(runs, summary, tests), encoding="utf-8")
        logger.info(f"Report for {len(runs)} runs written to {report_dir}")
        return {name: str(path) for name, path in files.items()}
