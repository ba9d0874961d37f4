import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dktlab import autodiff as ad
from dktlab.autodiff import Tensor
from dktlab.backbone import MLP, MLPConfig, flatten_params, forward, init_mlp, unflatten_params


def test_parameter_count_by_shape_arithmetic():
    # 1*40+40 + 40*40+40 + 40*40+40
    mlp = MLP(MLPConfig(1, [40, 40], 40))
    assert mlp.n_params() == 1 * 40 + 40 + 40 * 40 + 40 + 40 * 40 + 40 == 3360
    assert mlp.flatten().size == 3360


def test_same_seed_same_parameters():
    a, b = MLP(MLPConfig(seed=4)), MLP(MLPConfig(seed=4))
    np.testing.assert_array_equal(a.flatten(), b.flatten())


def test_different_seed_different_parameters():
    assert not np.array_equal(MLP(MLPConfig(seed=0)).flatten(), MLP(MLPConfig(seed=1)).flatten())


def test_glorot_bounds_and_zero_biases():
    for w, b in init_mlp(MLPConfig(3, [7], 5)):
        fan_out, fan_in = w.shape
        assert np.all(np.abs(w.values) <= np.sqrt(6.0 / (fan_in + fan_out)))
        np.testing.assert_array_equal(b.values, 0.0)


def test_zero_parameters_give_zero_output():
    mlp = MLP(MLPConfig(2, [4], 3))
    mlp.load_flat(np.zeros(mlp.n_params()))
    np.testing.assert_array_equal(mlp(np.ones((5, 2))).values, 0.0)


def test_single_layer_is_affine():
    rng = np.random.default_rng(0)
    w, b = rng.standard_normal((3, 2)), rng.standard_normal((1, 3))
    x = rng.standard_normal((4, 2))
    out = forward([(Tensor(w), Tensor(b))], Tensor(x))
    np.testing.assert_allclose(out.values, x @ w.T + b, rtol=1e-14)


def test_input_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        MLP(MLPConfig(2, [4], 3))(np.ones((5, 3)))


def test_invalid_config():
    with pytest.raises(ValueError):
        MLPConfig(1, [0], 4)
    with pytest.raises(ValueError):
        MLPConfig(activation="sigmoid")


def test_flatten_round_trip_is_exact():
    mlp = MLP(MLPConfig(1, [40, 40], 40, seed=3))
    flat = mlp.flatten()
    other = MLP(MLPConfig(1, [40, 40], 40, seed=9))
    unflatten_params(flat, other.layers)
    np.testing.assert_array_equal(flatten_params(other.layers), flat)


def test_unflatten_wrong_length():
    mlp = MLP(MLPConfig(1, [4], 2))
    with pytest.raises(ValueError):
        mlp.load_flat(np.zeros(mlp.n_params() + 1))


def test_forward_is_deterministic():
    mlp = MLP(MLPConfig(1, [8], 4))
    x = np.linspace(-1, 1, 6)[:, None]
    np.testing.assert_array_equal(mlp(x).values, mlp(x).values)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**16), st.integers(0, 3))
def test_doubling_final_row_doubles_output_coordinate(seed, row):
    mlp = MLP(MLPConfig(1, [6, 6], 4, seed=seed))
    x = np.random.default_rng(seed).uniform(-5, 5, (5, 1))
    before = mlp(x).values.copy()
    w, b = mlp.layers[-1]
    w.values[row] *= 2.0
    b.values[0, row] *= 2.0
    after = mlp(x).values
    np.testing.assert_allclose(after[:, row], 2.0 * before[:, row], rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(np.delete(after, row, 1), np.delete(before, row, 1))


def test_clone_is_independent():
    mlp = MLP(MLPConfig(1, [4], 2))
    c = mlp.clone()
    c.layers[0][0].values[:] = 0.0
    assert np.any(mlp.layers[0][0].values != 0.0)


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_backbone_gradients_over_all_layers(activation):
    mlp = MLP(MLPConfig(1, [8, 8], 4, activation, seed=2))
    x = Tensor(np.random.default_rng(1).uniform(-3, 3, (6, 1)))
    f = lambda: ad.tsum(ad.square(mlp(x)))
    assert ad.grad_check(f, mlp.tensors()) < 1e-4
