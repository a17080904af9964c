"""
Tests for the consolidated experiment report.
"""

import os
import sys

import numpy as np
import pandas as pd
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from experiments.report_generator import ExperimentReportGenerator
from services.evaluation import CUTOFFS, METRICS
from services.gradcore import ParamStore
from services.snapshot import save_snapshot

NUM_USERS = 40

# Mean H@5 per (method, seed); CD is the stronger baseline at both seeds
H5 = {
    "none": (0.30, 0.28),
    "rd": (0.32, 0.31),
    "cd": (0.35, 0.34),
    "de-rrd": (0.42, 0.44),
}


def user_hits(method, seed):
    """Per-user 0/1 hits; each method adds hits on top of the previous one."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(NUM_USERS)
    hits = np.zeros(NUM_USERS)
    count = {"none": 10, "rd": 12, "cd": 15, "de-rrd": 20}[method]
    hits[order[:count]] = 1.0
    return hits


def write_run(root, method, seed, h5):
    directory = root / f"bpr_{method}_phi0.1_seed{seed}"
    directory.mkdir(parents=True)
    (directory / "config.txt").write_text(f"method = {method}\n", encoding="utf-8")
    params = ParamStore()
    params.add("user_emb", np.zeros((2, 2)))
    save_snapshot(directory / "snapshot.bin", params, {"role": "student", "method": method, "base_model": "bpr",
                                                       "phi": 0.1, "seed": seed, "best_epoch": 1})
    rows = []
    for metric in METRICS:
        for cutoff in CUTOFFS:
            value = h5 if (metric, cutoff) == ("H", 5) else 0.5
            rows.append({"method": method, "phi": 0.1, "metric": metric, "cutoff": cutoff,
                         "repeat": 0, "value": value})
    pd.DataFrame(rows).to_csv(directory / "eval_test.csv", index=False)
    positions = np.where(user_hits(method, seed) > 0, 1, 50)
    pd.DataFrame({"user": np.arange(NUM_USERS), "repeat": 0, "position": positions}).to_csv(
        directory / "hits_test.csv", index=False)


@pytest.fixture
def report_root(tmp_path):
    for method, values in H5.items():
        for seed, h5 in enumerate(values):
            write_run(tmp_path, method, seed, h5)
    return tmp_path


class TestImprovementColumns:

    def test_improvement_over_student_and_best_baseline(self, report_root):
        """Improv.s compares with the plain student, Improv.b with the better of RD and CD."""
        generator = ExperimentReportGenerator(str(report_root))
        summary = generator.method_summary(generator.collect()).set_index("method")

        assert generator.best_baseline(summary.reset_index(), "bpr", 0.1) == "cd"
        row = summary.loc["de-rrd"]
        assert row["best_baseline"] == "cd"
        assert row["improv_H@5"] == pytest.approx((0.43 - 0.29) / 0.29)
        assert row["improvb_H@5"] == pytest.approx((0.43 - 0.345) / 0.345)
        assert row["improvb_H@10"] == pytest.approx(0.0)

        for baseline in ("rd", "cd"):
            assert np.isnan(summary.loc[baseline, "improvb_H@5"])
            assert not np.isnan(summary.loc[baseline, "improv_H@5"])
        assert np.isnan(summary.loc["none", "improv_H@5"])

    def test_no_baseline_runs_leaves_improvb_empty(self, tmp_path):
        write_run(tmp_path, "none", 0, 0.3)
        write_run(tmp_path, "de-rrd", 0, 0.4)
        generator = ExperimentReportGenerator(str(tmp_path))
        summary = generator.method_summary(generator.collect()).set_index("method")
        assert summary.loc["de-rrd", "improv_H@5"] == pytest.approx(1 / 3)
        assert np.isnan(summary.loc["de-rrd", "improvb_H@5"])


class TestSignificance:

    def test_tests_against_the_best_baseline(self, report_root):
        generator = ExperimentReportGenerator(str(report_root))
        tests = generator.significance(generator.collect())

        ours = tests[tests["method"] == "de-rrd"]
        assert len(ours) == 2
        assert (ours["best_baseline"] == "cd").all()
        assert ours["p_vs_best"].between(0.0, 1.0).all()
        # five extra hits out of forty users, paired on the same users
        assert (ours["p_vs_best"] > ours["p_users"]).all()
        assert ours["p_seeds_vs_best"].notna().all()

        baselines = tests[tests["method"].isin(["rd", "cd"])]
        assert baselines["p_vs_best"].isna().all()
        assert baselines["p_users"].notna().all()

    def test_text_report_lists_both_improvements(self, report_root):
        generator = ExperimentReportGenerator(str(report_root))
        files = generator.save_reports()
        text = open(files["text"], encoding="utf-8").read()
        assert "IMPROV.S" in text
        assert "IMPROV.B (relative to the best of RD and CD)" in text
        assert "p_vs_best" in text
        summary = pd.read_csv(files["summary"])
        assert "improvb_H@5" in summary.columns
