import numpy as np
import pytest

from hmocgp.exceptions import NonFiniteGradientError
from hmocgp.optim import OptimizerState, rmsprop_step


class TestRmsprop:
    def test_first_step_hand_value(self):
        new, state = rmsprop_step(np.array([0.0]), np.array([2.0]), OptimizerState())
        assert new[0] == pytest.approx(-0.001 * 2 / (np.sqrt(0.4) + 1e-8), rel=1e-12)
        assert new[0] == pytest.approx(-0.0031623, abs=1e-7)

    def test_zero_gradient_decays_moment(self):
        state = OptimizerState(second_moment=np.array([4.0, 1.0]))
        p = np.array([1.0, -1.0])
        new, state = rmsprop_step(p, np.zeros(2), state)
        assert np.array_equal(new, p)
        np.testing.assert_allclose(state.second_moment, [3.6, 0.9])

    def test_constant_gradient_limit(self):
        p, state = np.zeros(1), OptimizerState()
        for _ in range(500):
            prev = p.copy()
            p, state = rmsprop_step(p, np.array([3.0]), state)
        assert abs(prev[0] - p[0]) == pytest.approx(1e-3, rel=1e-6)

    def test_zero_learning_rate_is_identity(self, rng):
        p = rng.standard_normal(5)
        new, _ = rmsprop_step(p, rng.standard_normal(5), OptimizerState(learning_rate=0.0))
        assert np.array_equal(new, p)

    @pytest.mark.parametrize("bad", [np.nan, np.inf])
    def test_non_finite_gradient_rejected(self, bad):
        state = OptimizerState()
        with pytest.raises(NonFiniteGradientError):
            rmsprop_step(np.zeros(2), np.array([1.0, bad]), state)
        assert state.skipped_steps == 1
        assert state.second_moment is None or np.all(state.second_moment == 0)

    def test_second_moment_nonnegative(self, rng):
        p, state = np.zeros(4), OptimizerState()
        for _ in range(20):
            p, state = rmsprop_step(p, rng.standard_normal(4), state)
        assert np.all(state.second_moment >= 0)
        assert state.second_moment.shape == p.shape
