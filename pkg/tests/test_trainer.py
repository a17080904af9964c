"""
Tests for the teacher and student training loops and the experiment CLI.
"""

import os
import sys
from dataclasses import replace

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ConfigError, ExperimentConfig, METHODS
from experiments.run_experiment import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main
from experiments.trainer import DistillationTrainer, distill, train_teacher
from models import bpr_loss
from services.dataset import build_negative_pool
from services.distill_experts import de_loss
from services.gradcore import NumericalError
from services.random_streams import stream
from services.ranking_distill import rrd_loss_arrays

TINY = {
    "teacher_dim": "16",
    "phi": "0.5",
    "epochs": "3",
    "patience": "30",
    "batch_size": "64",
    "eval_negatives": "20",
    "eval_repeats": "2",
    "cache_size": "20",
}


def tiny_config(**overrides):
    values = dict(TINY)
    values.update({k: str(v) for k, v in overrides.items()})
    return ExperimentConfig().with_overrides(values).validate()


@pytest.fixture(scope="module")
def pool(planted_dataset):
    return build_negative_pool(planted_dataset, seed=0, repeats=2, n_negatives=20)


@pytest.fixture(scope="module")
def bpr_teacher(planted_dataset, pool):
    return train_teacher(tiny_config(), planted_dataset, pool)


def model_state(result):
    return {n: result.params[n].copy() for n in result.model.tensor_names}


class TestTeacher:

    def test_teacher_is_full_width(self, bpr_teacher, planted_dataset):
        result, snapshot = bpr_teacher
        assert result.model.dim == 16
        assert snapshot.cache_size == 20
        assert snapshot.checksum
        assert 1 <= result.best_epoch <= 3
        for u in range(planted_dataset.num_users):
            assert not np.isin(snapshot.top_items[u], planted_dataset.train[u]).any()

    def test_best_state_is_stored_at_float32(self, bpr_teacher):
        result, _ = bpr_teacher
        for name in result.model.tensor_names:
            values = result.params[name]
            assert np.array_equal(values, values.astype(np.float32).astype(np.float64))


class TestDistillation:

    @pytest.mark.parametrize("method", METHODS)
    def test_every_method_trains(self, method, bpr_teacher, planted_dataset, pool):
        overrides = {"method": method}
        if method == "rd":
            overrides["rd_warmup_epochs"] = 1
        cfg = tiny_config(**overrides)
        _, teacher = bpr_teacher
        result = distill(cfg, teacher if method != "none" else None, planted_dataset, pool)

        assert result.model.dim == 8
        assert len(result.history) >= 1
        assert {"epoch", "base_loss", "kd_ratio", "tau", "val_h5", "seconds"} <= set(result.history.columns)
        for name in result.params.names():
            assert np.all(np.isfinite(result.params[name]))
        assert bool(result.banks) == (method in ("de", "de-rrd"))

    def test_zero_weights_reduce_to_the_plain_student(self, bpr_teacher, planted_dataset, pool):
        """With both weights at zero the joint objective trains exactly the plain student."""
        _, teacher = bpr_teacher
        plain = distill(tiny_config(method="none"), None, planted_dataset, pool)
        joint = distill(tiny_config(method="de-rrd", lambda_de=0, lambda_rrd=0), teacher, planted_dataset, pool)
        assert plain.history["val_h5"].tolist() == joint.history["val_h5"].tolist()
        assert plain.history["base_loss"].tolist() == joint.history["base_loss"].tolist()
        for name, values in model_state(plain).items():
            assert np.array_equal(values, joint.params[name])

    def test_runs_are_reproducible(self, bpr_teacher, planted_dataset, pool):
        _, teacher = bpr_teacher
        cfg = tiny_config(method="de-rrd")
        a = distill(cfg, teacher, planted_dataset, pool)
        b = distill(cfg, teacher, planted_dataset, pool)
        assert a.history.drop(columns="seconds").equals(b.history.drop(columns="seconds"))
        for name, values in model_state(a).items():
            assert np.array_equal(values, b.params[name])

    def test_joint_gradient_is_the_weighted_sum(self, bpr_teacher, planted_dataset, pool):
        """One minibatch of the joint objective accumulates base + lambda_DE DE + lambda_RRD RRD."""
        _, teacher = bpr_teacher
        cfg = tiny_config(method="de-rrd", lambda_de=0.1, lambda_rrd=0.01)
        trainer = DistillationTrainer(cfg, planted_dataset, pool, teacher=teacher)
        samples = trainer.prepare_epoch(0)
        users = planted_dataset.train_users[:40]
        pos = planted_dataset.train_items[:40]
        neg = (pos + 1) % planted_dataset.num_items

        trainer.params.zero_grads()
        losses = trainer.batch_losses(users, pos, neg, 0, samples, stream(0, "gumbel", 0), stream(0, "kd", 0))
        joint = {n: trainer.params.grad(n).copy() for n in trainer.params.names()}

        model = trainer.model
        trainer.params.zero_grads()
        base = bpr_loss(model, users, pos, neg)
        tap_users, tap_items = np.concatenate([users, users]), np.concatenate([pos, neg])
        de = de_loss(trainer.banks, model.taps(tap_users, tap_items), teacher.taps(tap_users, tap_items),
                     samples.tau, stream(0, "gumbel", 0), model, weight=0.1)
        batch_users = np.unique(users)
        _, interesting, un, mask = samples.rrd
        rrd = rrd_loss_arrays(model, batch_users, interesting[batch_users], un[batch_users], mask[batch_users],
                              "relaxed", 0.01)

        assert losses == pytest.approx({"base": base, "de": de, "rrd": rrd})
        for name, grad in joint.items():
            assert trainer.params.grad(name) == pytest.approx(grad, rel=1e-12, abs=1e-15)

    def test_neumf_student(self, planted_dataset, pool):
        cfg = tiny_config(base_model="neumf", epochs=2)
        teacher_result, teacher = train_teacher(cfg, planted_dataset, pool)
        assert teacher_result.model.base_model == "neumf"
        result = distill(cfg.with_overrides({"method": "de-rrd"}).validate(), teacher, planted_dataset, pool)
        assert set(result.banks) == {"joint"}
        assert result.model.dim == 8

    def test_teacher_from_another_dataset_refused(self, bpr_teacher, planted_dataset, pool):
        _, teacher = bpr_teacher
        with pytest.raises(ConfigError):
            distill(tiny_config(method="rrd"), replace(teacher, checksum="0" * 16), planted_dataset, pool)
        with pytest.raises(ConfigError):
            distill(tiny_config(method="rrd", base_model="neumf"), teacher, planted_dataset, pool)

    def test_methods_need_a_teacher(self, planted_dataset, pool):
        with pytest.raises(ConfigError):
            DistillationTrainer(tiny_config(method="de"), planted_dataset, pool)

    def test_non_finite_loss_aborts(self, planted_dataset, pool):
        trainer = DistillationTrainer(tiny_config(), planted_dataset, pool)
        trainer.params["user_emb"][...] = np.nan
        with pytest.raises(NumericalError):
            trainer.train_epoch(0)


class TestCommandLine:

    def common(self, tmp_path):
        args = ["--data-path", str(tmp_path / "planted.tsv"), "--output-dir", str(tmp_path / "runs")]
        for key, value in {**TINY, "epochs": "2", "latency_repeats": "1"}.items():
            args += [f"--{key.replace('_', '-')}", value]
        return args

    def test_end_to_end(self, tmp_path):
        common = self.common(tmp_path)
        assert main(["prepare-data", "--synthetic", "--num-users", "30", "--num-items", "60",
                     "--num-blocks", "5", *common]) == EXIT_OK
        assert (tmp_path / "runs" / "manifest.txt").exists()
        assert main(["train-teacher", *common]) == EXIT_OK
        teacher = tmp_path / "runs" / "bpr_teacher_seed0"
        assert (teacher / "snapshot.bin").exists() and (teacher / "teacher_cache.npz").exists()

        for method in ("none", "de-rrd"):
            assert main(["distill", "--method", method, *common]) == EXIT_OK
        run = tmp_path / "runs" / "bpr_de-rrd_phi0.5_seed0"
        assert {"snapshot.bin", "experts.bin", "history.csv", "eval_test.csv", "hits_test.csv",
                "experts_user.csv", "experts_item.csv"} <= {p.name for p in run.iterdir()}

        assert main(["evaluate", "--method", "de-rrd", *common]) == EXIT_OK
        assert main(["bench-latency", "--method", "de-rrd", *common]) == EXIT_OK
        assert (run / "latency.json").exists()
        assert main(["export-experts", "--method", "de-rrd", *common]) == EXIT_OK

        assert main(["report", *common]) == EXIT_OK
        report = tmp_path / "runs" / "report" / "report.txt"
        first = report.read_bytes()
        assert main(["report", *common]) == EXIT_OK
        assert report.read_bytes() == first
        assert b"de-rrd" in first

    def test_configuration_errors_exit_with_two(self, tmp_path):
        out = ["--output-dir", str(tmp_path)]
        assert main(["distill", "--method", "nope", *out]) == EXIT_CONFIG
        assert main(["train-teacher", "--data-path", str(tmp_path / "absent.tsv"), *out]) == EXIT_CONFIG
        assert main(["distill", "--method", "none", "--rrd-k", "5", *out]) == EXIT_CONFIG
        assert EXIT_NUMERICAL == 3
