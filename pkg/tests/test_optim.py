import math

import numpy as np
import pytest

from capfuse.errors import ShapeMismatch
from capfuse.optim import OptimState, adamw_step, cosine_lr


class TestAdamW:
    def test_first_step_reference_value(self):
        # theta=1, g=0.5, lr=0.1, wd=0: bias correction makes the first
        # update lr * m_hat / (sqrt(v_hat) + eps) = 0.1 * 0.5 / (0.5 + 1e-8)
        params = {"x": np.array([1.0])}
        state = OptimState.for_params(params)
        adamw_step(params, {"x": np.array([0.5])}, state, lr=0.1)
        assert abs(params["x"][0] - 0.9) < 1e-7

    def test_zero_gradient_no_decay_is_noop(self):
        params = {"x": np.array([1.0, -2.0])}
        state = OptimState.for_params(params)
        for _ in range(5):
            adamw_step(params, {"x": np.zeros(2)}, state, lr=0.1)
        np.testing.assert_array_equal(params["x"], [1.0, -2.0])

    def test_pure_weight_decay(self):
        params = {"x": np.array([1.0])}
        state = OptimState.for_params(params)
        adamw_step(params, {"x": np.zeros(1)}, state, lr=0.1, weight_decay=0.1)
        assert abs(params["x"][0] - 0.99) < 1e-12

    def test_zero_lr_is_noop(self, rng):
        params = {"w": rng.normal(size=(3, 3))}
        before = params["w"].copy()
        state = OptimState.for_params(params)
        for _ in range(10):
            adamw_step(params, {"w": rng.normal(size=(3, 3))}, state,
                       lr=0.0, weight_decay=0.1)
        np.testing.assert_array_equal(params["w"], before)

    def test_shape_mismatch(self):
        params = {"x": np.zeros(3)}
        state = OptimState.for_params(params)
        with pytest.raises(ShapeMismatch):
            adamw_step(params, {"x": np.zeros(4)}, state, lr=0.1)

    def test_missing_grad_key_skipped(self):
        params = {"x": np.array([2.0]), "y": np.array([3.0])}
        state = OptimState.for_params(params)
        adamw_step(params, {"x": np.array([1.0])}, state, lr=0.1)
        assert params["y"][0] == 3.0
        assert params["x"][0] != 2.0


class TestCosineLr:
    def test_start_is_max(self):
        assert cosine_lr(0, 100, 1e-3) == 1e-3

    def test_end_is_min(self):
        assert abs(cosine_lr(100, 100, 1e-3, 0.0)) < 1e-18

    def test_midpoint_is_half(self):
        assert abs(cosine_lr(50, 100, 1e-3, 0.0) - 5e-4) < 1e-12

    def test_formula(self):
        lr_max, lr_min = 2e-3, 1e-4
        for step in (0, 7, 31, 100):
            expected = lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / 100))
            assert abs(cosine_lr(step, 100, lr_max, lr_min) - expected) < 1e-15

    def test_out_of_range_step(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 100, 1e-3)
        with pytest.raises(ValueError):
            cosine_lr(-1, 100, 1e-3)
