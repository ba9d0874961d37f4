import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dktlab import autodiff as ad
from dktlab.autodiff import Tensor
from dktlab.backbone import MLP, MLPConfig
from dktlab.gp import (LOG_2PI, classify, dkt_task_loss, encode_labels, log_marginal_likelihood, posterior,
                       predict_regression, task_features)
from dktlab.kernels import GramMatrix, inv_softplus, latent_gram, make_kernel
from dktlab.tasks import (ClassificationTask, RegressionTask, SineTaskConfig, SyntheticFamilyConfig,
                          sample_classification_task, sample_sine_task)
from dktlab.trainer import ParamGroup, TrainConfig

from oracles import dense_lml, joint_conditioning, random_psd_problem


# log marginal likelihood


def test_lml_single_point_zero_target():
    v = log_marginal_likelihood(Tensor([[1.0]]), [0.0]).item()
    assert v == pytest.approx(-0.5 * LOG_2PI, abs=1e-15)
    assert v == pytest.approx(-0.9189, abs=1e-4)


def test_lml_single_point_target_two():
    assert log_marginal_likelihood(Tensor([[1.0]]), [2.0]).item() == pytest.approx(-2.0 - 0.5 * LOG_2PI)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_lml_matches_dense_oracle(n, seed):
    rng = np.random.default_rng(seed)
    k, noise, y = random_psd_problem(rng, n, 0)
    k_noisy = k + noise * np.eye(n)
    assert abs(log_marginal_likelihood(Tensor(k_noisy), y).item() - dense_lml(k_noisy, y)) < 1e-8


def test_lml_of_matrix_targets_sums_columns():
    rng = np.random.default_rng(1)
    k, noise, _ = random_psd_problem(rng, 6, 0)
    k = k + noise * np.eye(6)
    Y = rng.standard_normal((6, 3))
    total = sum(log_marginal_likelihood(Tensor(k), Y[:, j]).item() for j in range(3))
    assert log_marginal_likelihood(Tensor(k), Y).item() == pytest.approx(total, abs=1e-10)


# posterior


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_posterior_matches_joint_conditioning(n, m, seed):
    rng = np.random.default_rng(seed)
    k, noise, y = random_psd_problem(rng, n, m)
    post = posterior(k[:n, :n] + noise * np.eye(n), k[:n, n:], k[n:, n:], y)
    mean, cov = joint_conditioning(k, n, noise, y)
    assert np.max(np.abs(post.mean - mean)) < 1e-8
    assert np.max(np.abs(post.cov - cov)) < 1e-8


def test_empty_support_returns_prior():
    k_test = np.array([[2.0, 0.5], [0.5, 1.0]])
    post = posterior(np.zeros((0, 0)), np.zeros((0, 2)), k_test, np.zeros(0))
    np.testing.assert_array_equal(post.mean, 0.0)
    np.testing.assert_array_equal(post.cov, k_test)


def test_noise_free_interpolation():
    k = np.array([[1.7]])
    post = posterior(k + 1e-12, k, k, [0.8])
    assert post.mean[0] == pytest.approx(0.8, abs=1e-9)
    assert abs(post.cov[0, 0]) < 1e-9


def test_posterior_with_noise_adds_noise_to_diagonal():
    rng = np.random.default_rng(2)
    k, noise, y = random_psd_problem(rng, 4, 3)
    latent = posterior(k[:4, :4] + noise * np.eye(4), k[:4, 4:], k[4:, 4:], y)
    noisy = posterior(k[:4, :4] + noise * np.eye(4), k[:4, 4:], k[4:, 4:], y, with_noise=True, noise=noise)
    np.testing.assert_allclose(noisy.cov - latent.cov, noise * np.eye(3), atol=1e-14)
    assert noisy.includes_noise and not latent.includes_noise


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_posterior_variance_bounded_by_prior(n, m, seed):
    rng = np.random.default_rng(seed)
    k, noise, y = random_psd_problem(rng, n, m)
    post = posterior(k[:n, :n] + noise * np.eye(n), k[:n, n:], k[n:, n:], y, with_noise=True, noise=noise)
    assert np.all(post.variance <= np.diag(k[n:, n:]) + noise + 1e-10)
    np.testing.assert_allclose(post.cov, post.cov.T, atol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_nested_supports_never_increase_variance(n, seed):
    rng = np.random.default_rng(seed)
    k, noise, y = random_psd_problem(rng, n, 1)
    prev = k[n, n]
    for j in range(1, n + 1):
        idx = list(range(j))
        post = posterior(k[np.ix_(idx, idx)] + noise * np.eye(j), k[idx, n:], k[n:, n:], y[:j])
        assert post.cov[0, 0] <= prev + 1e-10
        prev = post.cov[0, 0]


# regression predictions through the deep kernel


def test_empty_query_gives_empty_posterior():
    post = predict_regression(make_kernel("rbf", 1), None, [0.0, 1.0], [0.2, 0.3], np.zeros(0))
    assert post.mean.shape == (0,) and post.cov.shape == (0, 0)


def test_far_field_reverts_to_prior():
    spec = make_kernel("rbf", 1, lengthscale=0.5, noise=0.04)
    post = predict_regression(spec, None, [0.0, 0.3, -0.4], [1.0, -2.0, 0.5], [100.0, -80.0])
    np.testing.assert_allclose(post.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(post.variance, 1.0 + 0.04, atol=1e-10)


def test_diagonal_mode_matches_full_covariance():
    rng = np.random.default_rng(5)
    mlp = MLP(MLPConfig(1, [8], 4))
    spec = make_kernel("spectral", 4)
    xs, ys, xq = rng.uniform(-5, 5, 5), rng.standard_normal(5), rng.uniform(-5, 5, 7)
    full = predict_regression(spec, mlp, xs, ys, xq)
    diag = predict_regression(spec, mlp, xs, ys, xq, full_cov=False)
    np.testing.assert_allclose(diag.mean, full.mean, atol=1e-12)
    np.testing.assert_allclose(diag.variance, full.variance, atol=1e-10)


# task loss


def test_regression_loss_is_pooled_negative_lml():
    task = sample_sine_task(SineTaskConfig(seed=0), "train", 0)
    spec, mlp = make_kernel("rbf", 4), MLP(MLPConfig(1, [8], 4))
    h = mlp(task.x.reshape(-1, 1)).values
    sq = ((h[:, None] - h[None]) ** 2).sum(-1)
    k = np.exp(-sq / 2.0) + (spec.constrained("noise") + 1e-6) * np.eye(10)
    assert dkt_task_loss(spec, mlp, task).item() == pytest.approx(-dense_lml(k, task.y), abs=1e-9)


def per_class_sum(spec, mlp, task, lml=None):
    """Sum of C single-output losses on the shared Gram."""
    h = task_features(spec, mlp, task.x)
    k = latent_gram(spec, h, h).values + (spec.constrained("noise") + 1e-6) * np.eye(h.shape[0])
    Y = encode_labels(task.labels, task.ways).targets
    lml = lml or (lambda k, y: log_marginal_likelihood(Tensor(k), y).item())
    return sum(-lml(k, Y[:, c]) for c in range(task.ways))


@pytest.mark.parametrize("kernel", ["bncossim", "rbf", "linear"])
def test_classification_loss_is_sum_of_binary_losses(kernel):
    gen = SyntheticFamilyConfig(seed=1)
    mlp = MLP(MLPConfig(2, [8], 4, seed=1))
    spec = make_kernel(kernel, 4, lengthscale=2.0)
    for i in range(5):
        task = sample_classification_task(gen, 2 + i % 3, 1, 3, "train", i)
        assert dkt_task_loss(spec, mlp, task).item() == pytest.approx(per_class_sum(spec, mlp, task), abs=1e-10)


def test_classification_loss_against_dense_oracle():
    gen = SyntheticFamilyConfig(seed=2)
    mlp = MLP(MLPConfig(2, [8], 4, seed=2))
    spec = make_kernel("rbf", 4, lengthscale=2.0, noise=0.1)
    task = sample_classification_task(gen, 3, 2, 3, "train", 0)
    want = per_class_sum(spec, mlp, task, dense_lml)
    assert dkt_task_loss(spec, mlp, task).item() == pytest.approx(want, rel=1e-10)


def test_one_adam_step_reduces_fixed_task_loss():
    task = sample_sine_task(SineTaskConfig(seed=0), "train", 7)
    spec, mlp = make_kernel("rbf", 8), MLP(MLPConfig(1, [16], 8, seed=0))
    groups = [ParamGroup(spec.tensors(), 1e-4), ParamGroup(mlp.tensors(), 1e-3)]
    with ad.GradTape() as tape:
        before = dkt_task_loss(spec, mlp, task)
    ad.backward(tape, before)
    for g in groups:
        g.step(TrainConfig())
    assert dkt_task_loss(spec, mlp, task).item() < before.item()


def test_loss_rejects_unknown_task_type():
    with pytest.raises(TypeError):
        dkt_task_loss(make_kernel("rbf", 1), None, object())


# labels and classification


def test_encode_labels_examples():
    np.testing.assert_array_equal(encode_labels([0, 1], 2).targets, [[1, -1], [-1, 1]])
    np.testing.assert_array_equal(encode_labels([2], 3).targets, [[-1, -1, 1]])
    with pytest.raises(ValueError):
        encode_labels([3], 3)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=20))
def test_encoding_has_one_positive_per_row(labels):
    t = encode_labels(labels, 5).targets
    assert np.all((t == 1).sum(axis=1) == 1)
    assert set(np.unique(t)) <= {-1.0, 1.0}


def test_query_equal_to_support_point_is_classified_as_its_class():
    spec = make_kernel("rbf", 2, noise=1e-6)
    xs = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]])
    for c in range(3):
        assert classify(spec, None, xs, [0, 1, 2], xs[c:c + 1]).predictions[0] == c


def test_mirrored_supports_under_stationary_kernel():
    spec = make_kernel("matern", 2)
    x = np.array([1.3, -0.4])
    pred = classify(spec, None, np.vstack([x, -x]), [0, 1], np.vstack([x, -x]))
    np.testing.assert_array_equal(pred.predictions, [0, 1])


def test_class_probabilities():
    gen = SyntheticFamilyConfig()
    task = sample_classification_task(gen, 5, 1, 4, "test", 0)
    pred = classify(make_kernel("bncossim", 8), MLP(MLPConfig(2, [8], 8)), task.support_x,
                    task.support_labels, task.query_x)
    assert np.all((pred.sigmoids > 0) & (pred.sigmoids < 1))
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, rtol=1e-14)
    np.testing.assert_array_equal(pred.probs.argmax(axis=1), pred.predictions)


def test_classify_requires_every_class():
    with pytest.raises(ValueError, match="classes"):
        classify(make_kernel("rbf", 2), None, np.zeros((2, 2)), [0, 0], np.zeros((1, 2)), n_classes=2)


def test_tasks_are_plain_data():
    # the loss accepts hand-built tasks as well as sampled ones
    reg = RegressionTask(np.array([0.0, 1.0]), np.array([0.0, 1.0]), np.array([2.0]), np.array([0.5]))
    cls = ClassificationTask(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([0, 1]),
                             np.array([[0.1, 0.0]]), np.array([0]), 2, 1)
    for t in (reg, cls):
        assert math.isfinite(dkt_task_loss(make_kernel("rbf", t.x.reshape(len(t.x), -1).shape[1]), None, t).item())


def test_inv_softplus_rejects_non_positive():
    with pytest.raises(ValueError):
        inv_softplus(0.0)


def test_gram_matrix_container():
    g = GramMatrix(Tensor(np.eye(2)), True)
    assert g.is_self
