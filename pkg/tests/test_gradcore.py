import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from services.gradcore import AdamState, NumericalError, ParamStore, adam_step, finite_diff_check


def quadratic(scale):
    def loss(params):
        w = params["w"]
        params.grad("w")[...] += scale * w
        return float(np.sum(w * w))
    return loss


class TestAdam:

    def test_first_step_matches_formula(self):
        """First bias-corrected step moves each coordinate by about the learning rate."""
        params = ParamStore()
        params.add("w", np.array([1.0, -2.0]))
        params.grad("w")[...] = [0.5, -3.0]
        adam_step(params, AdamState(learning_rate=0.1))
        assert params["w"] == pytest.approx([0.9, -1.9], abs=1e-6)
        assert params.step == 1

    def test_non_finite_gradient_aborts_without_update(self):
        """A NaN gradient raises and leaves every tensor untouched."""
        params = ParamStore()
        params.add("a", np.ones(3))
        params.add("b", np.ones(2))
        params.grad("a")[...] = 1.0
        params.grad("b")[1] = np.nan
        with pytest.raises(NumericalError):
            adam_step(params, AdamState())
        assert np.array_equal(params["a"], np.ones(3))
        assert params.step == 0

    def test_duplicate_tensor_rejected(self):
        params = ParamStore()
        params.add("w", np.zeros(2))
        with pytest.raises(KeyError):
            params.add("w", np.zeros(2))


class TestFiniteDifference:

    def test_correct_gradient_passes(self):
        """Analytic gradient of sum(w^2) agrees with central differences."""
        params = ParamStore()
        params.add("w", np.random.default_rng(0).normal(size=(4, 3)))
        report = finite_diff_check(quadratic(2.0), params)
        assert report.passed
        assert report.checked == 12
        assert report.max_error < 1e-6

    def test_wrong_gradient_fails(self):
        """A gradient off by half is caught."""
        params = ParamStore()
        params.add("w", np.full(5, 2.0))
        report = finite_diff_check(quadratic(3.0), params)
        assert not report.passed
        assert report.worst[0] == "w"

    def test_check_leaves_values_and_grads_clean(self):
        params = ParamStore()
        params.add("w", np.arange(4.0))
        before = params["w"].copy()
        finite_diff_check(quadratic(2.0), params)
        assert np.array_equal(params["w"], before)
        assert not params.grad("w").any()


class TestParamStore:

    def test_storage_precision_rounds_to_float32(self):
        params = ParamStore()
        params.add("w", np.array([0.1, 1.0 / 3.0]))
        params.to_storage_precision()
        assert params["w"].dtype == np.float64
        assert np.array_equal(params["w"], np.array([0.1, 1.0 / 3.0], dtype=np.float32).astype(np.float64))

    def test_load_state_dict_copies_in_place(self):
        """Arrays held elsewhere see restored values."""
        params = ParamStore()
        held = params.add("w", np.zeros(3))
        state = params.state_dict()
        params["w"][...] = 5.0
        params.load_state_dict(state)
        assert np.array_equal(held, np.zeros(3))
        with pytest.raises(ValueError):
            params.load_state_dict({"w": np.zeros(4)})
