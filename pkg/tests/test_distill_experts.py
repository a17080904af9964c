"""
Tests for the expert banks, the Gumbel-Softmax relaxation and the
latent-distillation loss.
"""

import os
import sys
import logging

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ConfigError
from models import BprModel, NeumfModel
from services.distill_experts import (ExpertBank, TemperatureSchedule, anneal, build_expert_banks, de_loss,
                                      export_expert_assignments, gumbel_softmax, select_and_reconstruct)
from services.gradcore import ParamStore, finite_diff_check


def spread_model(model, rng):
    for name in model.tensor_names:
        model.params[name][...] = rng.normal(0.0, 0.5, model.params[name].shape)


def bpr_pair(seed=0, student_dim=3, teacher_dim=6, num_users=5, num_items=8):
    rng = np.random.default_rng(seed)
    student = BprModel(ParamStore(), num_users, num_items, student_dim, rng=rng)
    teacher = BprModel(ParamStore(), num_users, num_items, teacher_dim, rng=rng)
    spread_model(student, rng)
    spread_model(teacher, rng)
    return student, teacher


class TestGumbelSoftmax:

    def test_samples_lie_on_the_simplex(self):
        rng = np.random.default_rng(0)
        log_alpha = np.log(rng.dirichlet(np.ones(5), size=10000))
        s = gumbel_softmax(log_alpha, rng.gumbel(size=log_alpha.shape), 0.5)
        assert np.all(s >= 0)
        assert s.sum(axis=1) == pytest.approx(np.ones(10000))

    def test_low_temperature_is_one_hot(self):
        """As tau goes to zero the sample is the argmax of log alpha + g."""
        rng = np.random.default_rng(1)
        log_alpha = np.log(rng.dirichlet(np.ones(4), size=10000))
        g = rng.gumbel(size=log_alpha.shape)
        s = gumbel_softmax(log_alpha, g, 1e-8)
        assert np.array_equal(np.argmax(s, axis=1), np.argmax(log_alpha + g, axis=1))
        assert np.sum(s.max(axis=1) > 1 - 1e-6) == 10000

    def test_two_experts_by_hand(self):
        """g = 0, alpha = (0.9, 0.1), tau = 0.1 leaves 1 / (1 + 9^10) on the weaker expert."""
        s = gumbel_softmax(np.log(np.array([[0.9, 0.1]])), np.zeros((1, 2)), 0.1)
        eps = 1.0 / (1.0 + 9.0 ** 10)
        assert eps == pytest.approx(2.87e-10, rel=1e-2)
        assert s[0, 1] == pytest.approx(eps, rel=1e-6)
        assert s[0, 0] == pytest.approx(1.0 - eps, rel=1e-12)

    def test_high_temperature_is_uniform(self):
        rng = np.random.default_rng(2)
        log_alpha = np.log(rng.dirichlet(np.ones(5), size=10000))
        s = gumbel_softmax(log_alpha, rng.gumbel(size=log_alpha.shape), 1e6)
        assert np.abs(s - 0.2).max() < 1e-3
        assert s.shape == (10000, 5)

    def test_non_positive_temperature_rejected(self):
        with pytest.raises(ValueError):
            gumbel_softmax(np.zeros((1, 3)), np.zeros((1, 3)), 0.0)


class TestAnnealing:

    def test_endpoints_and_midpoint(self):
        """tau starts at tau_0, ends at tau_P and passes their geometric mean halfway."""
        schedule = TemperatureSchedule(total_epochs=10, tau_0=1.0, tau_p=1e-10)
        assert anneal(schedule, 0) == 1.0
        assert anneal(schedule, 10) == 1e-10
        assert anneal(schedule, 5) == pytest.approx(1e-5, rel=1e-9)
        temps = [anneal(schedule, p) for p in range(11)]
        assert all(a > b for a, b in zip(temps, temps[1:]))

    def test_out_of_range_epochs(self, caplog):
        schedule = TemperatureSchedule(total_epochs=4)
        with caplog.at_level(logging.WARNING):
            assert anneal(schedule, 9) == schedule.tau_p
        assert any("beyond schedule" in r.message for r in caplog.records)
        with pytest.raises(ValueError):
            anneal(schedule, -1)


class TestExpertBank:

    def test_hidden_width_is_the_midpoint(self):
        params = ParamStore()
        bank = ExpertBank(params, "de.user", 5, 20, 200, rng=np.random.default_rng(0))
        assert bank.hidden_dim == 110
        assert params["de.user.w1"].shape == (5, 20, 110)
        assert params["de.user.sel_w"].shape == (200, 5)
        assert ExpertBank(ParamStore(), "x", 2, 3, 6, rng=np.random.default_rng(0)).hidden_dim == 4

    def test_width_mismatch_rejected(self):
        bank = ExpertBank(ParamStore(), "de.user", 3, 3, 6, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            bank.forward(np.zeros((2, 6)), np.zeros((2, 4)), 1.0, np.random.default_rng(0))

    def test_teacher_without_matching_tap_rejected(self):
        """A joint-tap student cannot learn from a separate-tap teacher."""
        rng = np.random.default_rng(0)
        student = NeumfModel(ParamStore(), 3, 4, 4, tap="joint", rng=rng)
        teacher = NeumfModel(ParamStore(), 3, 4, 8, tap="separate", rng=rng)
        with pytest.raises(ConfigError):
            build_expert_banks(student.params, student, teacher, 3, "selection", rng)

    def test_single_entity_reconstruction(self):
        bank = ExpertBank(ParamStore(), "de.item", 4, 3, 6, rng=np.random.default_rng(0))
        rng = np.random.default_rng(1)
        recon, outcome = select_and_reconstruct(bank, rng.normal(size=6), rng.normal(size=3), 0.3, rng)
        assert recon.shape == (6,)
        assert outcome.s.sum() == pytest.approx(1.0)
        assert outcome.alpha.sum() == pytest.approx(1.0)

    def test_small_ablation_has_one_expert(self):
        student, teacher = bpr_pair()
        banks = build_expert_banks(student.params, student, teacher, 5, "one_expert_small", np.random.default_rng(0))
        assert set(banks) == {"user", "item"}
        assert all(b.num_experts == 1 for b in banks.values())

    def test_export_lists_argmax_expert(self):
        bank = ExpertBank(ParamStore(), "de.user", 3, 2, 4, rng=np.random.default_rng(0))
        h_t = np.random.default_rng(1).normal(size=(6, 4))
        frame = export_expert_assignments(bank, [f"u{i}" for i in range(6)], h_t)
        assert list(frame.columns) == ["entity_type", "entity_id", "expert", "alpha_0", "alpha_1", "alpha_2"]
        alpha = frame[["alpha_0", "alpha_1", "alpha_2"]].to_numpy()
        assert np.array_equal(frame["expert"].to_numpy(), alpha.argmax(axis=1))
        assert (frame["entity_type"] == "user").all()


class TestDistillationLoss:

    @pytest.mark.parametrize("ablation", ["selection", "attention", "one_expert_large", "one_expert_small"])
    @pytest.mark.parametrize("squared", [False, True])
    @pytest.mark.parametrize("seed", range(5))
    def test_bpr_gradient(self, ablation, squared, seed):
        """Experts, selection network and student embeddings all get exact gradients."""
        student, teacher = bpr_pair(seed=seed)
        rng = np.random.default_rng(50 + seed)
        banks = build_expert_banks(student.params, student, teacher, 3, ablation, rng)
        users = rng.integers(5, size=4)
        items = rng.integers(8, size=4)

        def loss(params):
            return de_loss(banks, student.taps(users, items), teacher.taps(users, items), 0.7,
                           np.random.default_rng(5), student, squared=squared)

        report = finite_diff_check(loss, student.params, n_coords=300)
        assert report.passed, report.worst

    def test_neumf_joint_gradient(self):
        """The joint tap backpropagates through the NeuMF tower."""
        rng = np.random.default_rng(3)
        student = NeumfModel(ParamStore(), 4, 6, 4, tap="joint", rng=rng)
        teacher = NeumfModel(ParamStore(), 4, 6, 8, tap="joint", rng=rng)
        spread_model(student, rng)
        spread_model(teacher, rng)
        banks = build_expert_banks(student.params, student, teacher, 2, "selection", rng)
        users = np.array([0, 1, 3])
        items = np.array([5, 2, 2])

        def loss(params):
            return de_loss(banks, student.taps(users, items), teacher.taps(users, items), 0.5,
                           np.random.default_rng(7), student)

        report = finite_diff_check(loss, student.params, n_coords=300)
        assert report.passed, report.worst

    def test_teacher_is_never_updated(self):
        student, teacher = bpr_pair()
        banks = build_expert_banks(student.params, student, teacher, 3, "selection", np.random.default_rng(0))
        users, items = np.array([0, 2]), np.array([1, 3])
        de_loss(banks, student.taps(users, items), teacher.taps(users, items), 1.0, np.random.default_rng(0), student)
        assert all(not teacher.params.grad(n).any() for n in teacher.params.names())
        assert any(student.params.grad(n).any() for n in student.params.names())

    def test_perfect_reconstruction_has_zero_gradient(self):
        """At zero distance the loss is zero and every gradient is finite and zero."""
        student, teacher = bpr_pair()
        banks = build_expert_banks(student.params, student, teacher, 2, "one_expert_large", np.random.default_rng(0))
        users, items = np.array([1]), np.array([3])
        t_taps = teacher.taps(users, items)
        for tap in t_taps:
            bank = banks[tap.side]
            student.params[f"{bank.prefix}.w2"][...] = 0.0
            student.params[f"{bank.prefix}.b2"][...] = tap.values[0]
        loss = de_loss(banks, student.taps(users, items), t_taps, 1.0, np.random.default_rng(0), student)
        assert loss == 0.0
        for name in student.params.names():
            assert np.all(student.params.grad(name) == 0.0)

    def test_empty_batch(self):
        student, teacher = bpr_pair()
        banks = build_expert_banks(student.params, student, teacher, 2, "selection", np.random.default_rng(0))
        empty = np.empty(0, dtype=np.int64)
        assert de_loss(banks, student.taps(empty, empty), teacher.taps(empty, empty), 1.0,
                       np.random.default_rng(0), student) == 0.0

    def test_distance_by_hand(self):
        """h_t = (3, 4, 0, ...) against a zero reconstruction costs 5 per entity."""
        student, teacher = bpr_pair()
        banks = build_expert_banks(student.params, student, teacher, 2, "one_expert_large", np.random.default_rng(0))
        for bank in banks.values():
            student.params[f"{bank.prefix}.w2"][...] = 0.0
            student.params[f"{bank.prefix}.b2"][...] = 0.0
        teacher.params["user_emb"][2] = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0]
        teacher.params["item_emb"][6] = [0.0, 0.0, 0.0, 0.0, 0.0, 5.0]
        users, items = np.array([2]), np.array([6])
        loss = de_loss(banks, student.taps(users, items), teacher.taps(users, items), 1.0,
                       np.random.default_rng(0), student)
        assert loss == pytest.approx(5.0, rel=1e-12)
        squared = de_loss(banks, student.taps(users, items), teacher.taps(users, items), 1.0,
                          np.random.default_rng(0), student, squared=True)
        assert squared == pytest.approx(25.0, rel=1e-12)


class TestSelectionGradientFloor:

    def selection_grads(self, floor, tau):
        student, teacher = bpr_pair(seed=3)
        banks = build_expert_banks(student.params, student, teacher, 3, "selection", np.random.default_rng(1),
                                   grad_tau_floor=floor)
        users, items = np.array([0, 1, 4]), np.array([2, 5, 7])
        student.params.zero_grads()
        de_loss(banks, student.taps(users, items), teacher.taps(users, items), tau, np.random.default_rng(2), student)
        return {n: student.params.grad(n).copy() for n in student.params.names()}

    def test_floor_only_rescales_the_selection_network(self):
        """Below the floor the selection gradient is computed at the floor; nothing else changes."""
        tau = 0.05
        exact = self.selection_grads(0.0, tau)
        floored = self.selection_grads(0.5, tau)
        for name, grad in exact.items():
            if name.endswith(("sel_w", "sel_b")):
                assert floored[name] == pytest.approx(grad * tau / 0.5, rel=1e-10, abs=1e-15)
            else:
                assert np.array_equal(floored[name], grad)

    def test_floor_inactive_above_it(self):
        exact = self.selection_grads(0.0, 0.8)
        floored = self.selection_grads(1e-3, 0.8)
        for name, grad in exact.items():
            assert np.array_equal(floored[name], grad)

    def test_selection_gradient_stays_bounded_at_tiny_temperature(self):
        grads = self.selection_grads(1e-3, 1e-10)
        assert all(np.all(np.isfinite(g)) for g in grads.values())
        assert max(np.abs(grads[n]).max() for n in grads if n.endswith("sel_w")) < 1e4
