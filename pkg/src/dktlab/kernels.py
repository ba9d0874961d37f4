"""Base kernels, deep-kernel Gram construction and noise/jitter handling.

Hyperparameters live on :class:`KernelSpec` as unconstrained tensors and are
mapped through softplus whenever a positive value is needed. The scalar
kernel functions (``rbf_kernel`` and friends) are written directly in numpy
and double as loop oracles for the tensor Gram path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

KERNEL_NAMES = ("linear", "rbf", "matern", "poly1", "poly2", "spectral", "cossim", "bncossim")

COSSIM_EPS = 1e-8
BN_EPS = 1e-5
STATIONARY = ("rbf", "matern", "spectral")


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive values")
    # log(expm1(y)) without overflow for large y
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class KernelSpec:
    """Kernel family plus its raw (unconstrained) hyperparameter tensors.

    ``params`` always contains ``raw_noise``; the other entries depend on the
    family: ``raw_variance`` (linear), ``raw_lengthscale`` (rbf, matern),
    ``offset`` (poly1/poly2), ``raw_weights``/``raw_means``/``raw_scales``
    (spectral). Cosine kernels have only the noise.
    """

    family: str
    input_dim: int
    params: dict[str, Tensor] = field(default_factory=dict)

    @property
    def degree(self) -> int:
        return {"poly1": 1, "poly2": 2}[self.family]

    @property
    def n_mixtures(self) -> int:
        return self.params["raw_weights"].shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def constrained(self, name: str):
        """Constrained numpy value of a hyperparameter (noise, variance, lengthscale, ...)."""
        p = self.params
        if name == "noise":
            return float(softplus(p["raw_noise"].values[0, 0]))
        if name == "variance":
            return float(softplus(p["raw_variance"].values[0, 0]))
        if name == "lengthscale":
            return float(softplus(p["raw_lengthscale"].values[0, 0]))
        if name == "offset":
            return float(p["offset"].values[0, 0])
        if name == "weights":
            return softplus(p["raw_weights"].values[:, 0])
        if name == "means":
            return p["raw_means"].values.copy()
        if name == "scales":
            return softplus(p["raw_scales"].values)
        raise KeyError(name)

    def clone(self) -> "KernelSpec":
        return KernelSpec(self.family, self.input_dim,
                          {k: Tensor(v.values.copy(), requires_grad=v.requires_grad, name=k)
                           for k, v in self.params.items()})


def make_kernel(name: str, input_dim: int, lengthscale: float = 1.0, variance: float = 1.0,
                noise: float = 0.01, n_mixtures: int = 4, max_mean: float = 2.5) -> KernelSpec:
    if name not in KERNEL_NAMES:
        raise ValueError(f"unknown kernel {name!r}; valid kernels: {', '.join(KERNEL_NAMES)}")
    if input_dim < 1:
        raise ValueError("input_dim must be >= 1")

    def param(key, value):
        return Tensor(value, requires_grad=True, name=key)

    params = {"raw_noise": param("raw_noise", inv_softplus(noise))}
    if name == "linear":
        params["raw_variance"] = param("raw_variance", inv_softplus(variance))
    elif name in ("rbf", "matern"):
        params["raw_lengthscale"] = param("raw_lengthscale", inv_softplus(lengthscale))
    elif name in ("poly1", "poly2"):
        params["offset"] = param("offset", 0.0)
    elif name == "spectral":
        q = n_mixtures
        params["raw_weights"] = param("raw_weights", inv_softplus(np.full((q, 1), 1.0 / q)))
        means = np.repeat(np.linspace(0.0, max_mean, q)[:, None], input_dim, axis=1)
        params["raw_means"] = param("raw_means", means)
        params["raw_scales"] = param("raw_scales", inv_softplus(np.ones((q, input_dim))))
    return KernelSpec(name, input_dim, params)


# ---------------------------------------------------------------------------
# scalar kernels (plain numpy)


def _pair(x, z):
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if x.shape != z.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {z.shape[0]}")
    return x, z


def linear_kernel(spec: KernelSpec, x, z) -> float:
    x, z = _pair(x, z)
    return spec.constrained("variance") * float(x @ z)


def rbf_kernel(spec: KernelSpec, x, z) -> float:
    x, z = _pair(x, z)
    l = spec.constrained("lengthscale")
    return math.exp(-float(np.sum((x - z) ** 2)) / (2.0 * l * l))


def matern52_kernel(spec: KernelSpec, x, z) -> float:
    x, z = _pair(x, z)
    r = math.sqrt(float(np.sum((x - z) ** 2))) / spec.constrained("lengthscale")
    s = math.sqrt(5.0) * r
    return (1.0 + s + 5.0 * r * r / 3.0) * math.exp(-s)


def polynomial_kernel(spec: KernelSpec, x, z) -> float:
    x, z = _pair(x, z)
    p = spec.degree
    if p not in (1, 2):
        raise ValueError(f"unsupported polynomial degree {p}")
    return (float(x @ z) + spec.constrained("offset")) ** p


def spectral_mixture_kernel(spec: KernelSpec, x, z) -> float:
    x, z = _pair(x, z)
    tau = x - z
    w = spec.constrained("weights")
    mu = spec.constrained("means")
    v = spec.constrained("scales")
    total = 0.0
    for q in range(len(w)):
        term = w[q]
        for p in range(tau.size):
            term *= math.exp(-2.0 * math.pi ** 2 * tau[p] ** 2 * v[q, p])
            term *= math.cos(2.0 * math.pi * tau[p] * mu[q, p])
        total += term
    return total


def cossim_kernel(spec: KernelSpec | None, x, z) -> float:
    x, z = _pair(x, z)
    nx = math.sqrt(float(x @ x)) + COSSIM_EPS
    nz = math.sqrt(float(z @ z)) + COSSIM_EPS
    return float(x @ z) / (nx * nz)


def bn_center(h: np.ndarray) -> np.ndarray:
    """Per-dimension batch standardization used by the BN cosine kernel."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] < 2:
        raise ValueError("batch statistics need at least two rows")
    c = h - h.mean(axis=0, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=0, keepdims=True) + BN_EPS)


def bn_cossim_kernel(spec: KernelSpec | None, batch_x, batch_z) -> np.ndarray:
    """Gram of BN-centred cosine similarity; statistics come from the combined batch."""
    bx = np.atleast_2d(np.asarray(batch_x, dtype=np.float64))
    bz = np.atleast_2d(np.asarray(batch_z, dtype=np.float64))
    joint = bn_center(np.vstack([bx, bz]))
    cx, cz = joint[: bx.shape[0]], joint[bx.shape[0]:]
    return np.array([[cossim_kernel(spec, a, b) for b in cz] for a in cx])


SCALAR_KERNELS = {
    "linear": linear_kernel,
    "rbf": rbf_kernel,
    "matern": matern52_kernel,
    "poly1": polynomial_kernel,
    "poly2": polynomial_kernel,
    "spectral": spectral_mixture_kernel,
    "cossim": cossim_kernel,
}


# ---------------------------------------------------------------------------
# tensor Gram path


@dataclass
class GramMatrix:
    values: Tensor
    is_self: bool


def prepare_features(spec: KernelSpec, h: Tensor) -> Tensor:
    """Batch-level transform applied once to all features of a task.

    Only the BN cosine kernel needs it (centring with batch statistics).
    """
    if spec.family != "bncossim":
        return h
    if h.shape[0] < 2:
        raise ValueError("BN cosine kernel needs a batch of at least two rows")
    centred = h - ad.mean_rows(h)
    var = ad.mean_rows(ad.square(centred))
    return centred / ad.sqrt(var + BN_EPS)


def latent_gram(spec: KernelSpec, a: Tensor, b: Tensor) -> Tensor:
    """Kernel matrix between rows of already-prepared features ``a`` and ``b``."""
    if a.shape[1] != b.shape[1]:
        raise ad.ShapeError(f"feature dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    fam = spec.family
    p = spec.params
    if fam == "linear":
        return ad.softplus(p["raw_variance"]) * (a @ b.T)
    if fam == "rbf":
        l = ad.softplus(p["raw_lengthscale"])
        return ad.exp(ad.sqdist(a, b) / (-2.0 * ad.square(l)))
    if fam == "matern":
        return ad.matern52_from_sqdist(ad.sqdist(a, b), ad.softplus(p["raw_lengthscale"]))
    if fam in ("poly1", "poly2"):
        return ad.power(a @ b.T + p["offset"], spec.degree)
    if fam == "spectral":
        return ad.spectral_mixture_gram(a, b, ad.softplus(p["raw_weights"]), p["raw_means"],
                                        ad.softplus(p["raw_scales"]))
    if fam in ("cossim", "bncossim"):
        na = ad.row_normalize(a, COSSIM_EPS)
        nb = na if b is a else ad.row_normalize(b, COSSIM_EPS)
        return na @ nb.T
    raise ValueError(f"unknown kernel family {fam!r}")


def latent_diag(spec: KernelSpec, h: Tensor) -> np.ndarray:
    """Values k'(h_i, h_i) without forming the full Gram matrix."""
    fam = spec.family
    hv = h.values
    sq = (hv * hv).sum(axis=1)
    if fam == "linear":
        return spec.constrained("variance") * sq
    if fam in ("rbf", "matern"):
        return np.ones(hv.shape[0])
    if fam in ("poly1", "poly2"):
        return (sq + spec.constrained("offset")) ** spec.degree
    if fam == "spectral":
        return np.full(hv.shape[0], spec.constrained("weights").sum())
    if fam in ("cossim", "bncossim"):
        return sq / (np.sqrt(sq) + COSSIM_EPS) ** 2
    raise ValueError(f"unknown kernel family {fam!r}")


def features(backbone, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x if backbone is None else backbone.forward(x)


def gram(spec: KernelSpec, backbone, X, Z=None) -> GramMatrix:
    """Deep-kernel Gram k'(F(x), F(z)); ``Z=None`` means X against itself.

    For the BN cosine kernel the centring statistics are taken over X and Z
    together.
    """
    hx = features(backbone, X)
    if Z is None:
        h = prepare_features(spec, hx)
        return GramMatrix(latent_gram(spec, h, h), True)
    hz = features(backbone, Z)
    if spec.family == "bncossim":
        joint = prepare_features(spec, ad.vstack([hx, hz]))
        n = hx.shape[0]
        hx, hz = ad.rows(joint, 0, n), ad.rows(joint, n, joint.shape[0])
    return GramMatrix(latent_gram(spec, hx, hz), False)


def add_noise_and_jitter(g: GramMatrix, spec: KernelSpec, jitter: float = 1e-6) -> Tensor:
    """K + (noise + jitter) I."""
    if not g.is_self:
        raise ValueError("noise is only added to a self Gram matrix")
    n = g.values.shape[0]
    noise = ad.softplus(spec.params["raw_noise"])
    return g.values + (noise + jitter) * Tensor(np.eye(n))
