"""Adaptive-moment updates: first-step magnitude, accumulation, validation."""
import numpy as np
import pytest

from subadapt.optim import OptimizerState, optimizer_step
from subadapt.tensor import ShapeError, Tensor


def test_first_step_moves_by_learning_rate():
    # with zeroed moments and bias correction, step one is lr * sign(g)
    # up to the epsilon such that |delta| = lr * |g| / (|g| + eps)
    p = Tensor(np.array([1.0, -2.0, 0.5]))
    g = np.array([0.3, -40.0, 1e-3])
    state = OptimizerState(learning_rate=1e-3)
    before = p.data.copy()
    optimizer_step({"w": p}, {"w": g}, state)
    delta = p.data - before
    expected = -state.learning_rate * g / (np.abs(g) + state.epsilon)
    assert np.allclose(delta, expected, rtol=0, atol=1e-15)
    assert np.all(np.abs(delta) < state.learning_rate)
    assert np.all(np.abs(delta) > state.learning_rate * 0.99)


def test_zero_gradient_leaves_parameter_unchanged():
    p = Tensor(np.array([3.0, 4.0]))
    state = OptimizerState()
    optimizer_step({"w": p}, {"w": np.zeros(2)}, state)
    assert np.array_equal(p.data, [3.0, 4.0])


def test_matches_reference_formula_over_several_steps():
    rng = np.random.default_rng(5)
    p = Tensor(rng.normal(size=(2, 3)))
    ref = p.data.copy()
    state = OptimizerState(learning_rate=0.01)
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 6):
        g = rng.normal(size=(2, 3))
        optimizer_step({"w": p}, {"w": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, ref, rtol=0, atol=1e-14)
    assert state.step_count == 5


def test_same_inputs_give_bitwise_identical_trajectories():
    def run():
        p = Tensor(np.linspace(-1, 1, 6).reshape(2, 3))
        state = OptimizerState()
        for t in range(4):
            optimizer_step({"w": p}, {"w": np.full((2, 3), 0.1 * (t + 1))}, state)
        return p.data
    assert np.array_equal(run(), run())


def test_missing_and_misshaped_gradients_are_rejected():
    p = Tensor(np.zeros((2, 2)))
    state = OptimizerState()
    with pytest.raises(KeyError):
        optimizer_step({"w": p}, {}, state)
    with pytest.raises(ShapeError):
        optimizer_step({"w": p}, {"w": np.zeros(3)}, state)
    assert state.step_count == 0  # rejected before any mutation


def test_state_validation():
    with pytest.raises(ValueError):
        OptimizerState(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimizerState(beta1=1.0)
    with pytest.raises(ValueError):
        OptimizerState(beta2=-0.1)
    with pytest.raises(ValueError):
        OptimizerState(epsilon=0.0)
