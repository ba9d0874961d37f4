"""Finite-difference gradient suite shared by the CLI and the tests."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .backbone import MLP, MLPConfig
from .gp import dkt_task_loss
from .kernels import KERNEL_NAMES, make_kernel
from .tasks import SineTaskConfig, SyntheticFamilyConfig, sample_classification_task, sample_sine_task

TOLERANCE = 1e-4


def _perturbed_kernel(name: str, dim: int, rng: np.random.Generator):
    k = make_kernel(name, dim, lengthscale=1.5, noise=0.1)
    for key, t in k.params.items():
        t.values = t.values + 0.2 * rng.standard_normal(t.shape)
    if "offset" in k.params:
        # negative offsets make the polynomial kernel indefinite
        k.params["offset"].values = np.abs(k.params["offset"].values)
    return k


def _primitive_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    a = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = ad.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    out = [("matmul", ad.grad_check(lambda: ad.tsum(a @ b), [a, b]))]

    m = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)

    def spd():
        return m @ m.T + ad.Tensor(4.0 * np.eye(4))

    w = ad.Tensor(rng.standard_normal((4, 4)))
    out.append(("cholesky", ad.grad_check(lambda: ad.tsum(w * ad.cholesky(spd())), [m])))
    rhs = ad.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    w2 = ad.Tensor(w.values[:, :2])
    out.append(("solve_cholesky", ad.grad_check(
        lambda: ad.tsum(ad.solve_cholesky(ad.cholesky(spd()), rhs) * w2), [m, rhs])))
    out.append(("logdet_from_chol", ad.grad_check(lambda: ad.logdet_from_chol(ad.cholesky(spd())), [m])))
    return out


def gradcheck_suite(seed: int = 0, max_entries: int = 40) -> list[tuple[str, float]]:
    """Max relative gradient error for primitives, backbone, and every kernel's task loss."""
    rng = np.random.default_rng(seed)
    results = _primitive_checks(rng)

    reg_mlp = MLP(MLPConfig(1, [8, 8], 4, "relu", seed))
    x = ad.Tensor(rng.uniform(-3, 3, (6, 1)))
    results.append(("backbone", ad.grad_check(lambda: ad.tsum(ad.square(reg_mlp.forward(x))),
                                              reg_mlp.tensors())))
    sine = sample_sine_task(SineTaskConfig(seed=seed), "train", 0)
    for name in ("rbf", "spectral"):
        k = _perturbed_kernel(name, 4, rng)
        results.append((f"dkt-regression-relu/{name}", ad.grad_check(
            lambda: dkt_task_loss(k, reg_mlp, sine), k.tensors() + reg_mlp.tensors(),
            max_entries=max_entries, rng=rng)))
    # smooth backbone below: finite differences are unreliable across ReLU kinks
    reg_mlp = MLP(MLPConfig(1, [8, 8], 4, "tanh", seed))
    cls_mlp = MLP(MLPConfig(2, [8, 8], 4, "tanh", seed))
    gen = SyntheticFamilyConfig(spacing=0.1, seed=seed)
    cls_task = sample_classification_task(gen, ways=3, shots=1, query_per_class=3, split="train")
    for name in KERNEL_NAMES:
        k = _perturbed_kernel(name, 4, rng)
        params = k.tensors() + reg_mlp.tensors()
        results.append((f"dkt-regression/{name}", ad.grad_check(
            lambda: dkt_task_loss(k, reg_mlp, sine), params, max_entries=max_entries, rng=rng)))
        k = _perturbed_kernel(name, 4, rng)
        params = k.tensors() + cls_mlp.tensors()
        results.append((f"dkt-classification/{name}", ad.grad_check(
            lambda: dkt_task_loss(k, cls_mlp, cls_task), params, max_entries=max_entries, rng=rng)))
    return results
