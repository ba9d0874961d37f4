"""Dense reverse-mode differentiation over 2-D float64 tensors.

Every tensor is a matrix: scalars are 1x1 and vectors are n x 1 columns.
Operations executed inside an active :class:`GradTape` are recorded when any
input requires a gradient; :func:`backward` then walks the tape in reverse.
Outside a tape the same functions only compute values, which is what
prediction code relies on.

Broadcasting is limited to (1,1), (1,m) and (n,1) operands against an (n,m)
operand.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky pivot was not strictly positive."""


class ShapeError(ValueError):
    pass


def _as_2d(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix of float64 values with an optional accumulated gradient."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _check: bool = True):
        arr = _as_2d(values)
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".strip())
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...],
                 backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_state = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_state, "tape", None)


class GradTape:
    """Ordered record of primitive operations.

    Use as a context manager; operations run inside the block are recorded
    in execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._previous = None

    def __enter__(self) -> "GradTape":
        self._previous = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = self._previous

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _record(out: Tensor, inputs: tuple[Tensor, ...], fn) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, fn))
    return out


def backward(tape: GradTape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor."""
    if loss.values.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.nodes):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        _deposit(node.out, g)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = inp
    # whatever remains belongs to leaves
    for key, g in grads.items():
        _deposit(touched[key], g)


def _deposit(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = Tensor(a.values + b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = Tensor(a.values - b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = Tensor(a.values * b.values)
    return _record(out, (a, b), lambda g: (_unbroadcast(g * b.values, a.shape),
                                           _unbroadcast(g * a.values, b.shape)))


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)
    out = Tensor(a.values / b.values)

    def fn(g):
        return (_unbroadcast(g / b.values, a.shape),
                _unbroadcast(-g * out.values / b.values, b.shape))

    return _record(out, (a, b), fn)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.values)
    return _record(out, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = Tensor(a.values @ b.values)
    return _record(out, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.values.T.copy(), _check=False)
    return _record(out, (a,), lambda g: (g.T,))


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.values))
    return _record(out, (a,), lambda g: (g * out.values,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values))
    return _record(out, (a,), lambda g: (g / a.values,))


def sqrt(a: Tensor) -> Tensor:
    out = Tensor(np.sqrt(a.values))
    return _record(out, (a,), lambda g: (0.5 * g / out.values,))


def square(a: Tensor) -> Tensor:
    out = Tensor(a.values * a.values)
    return _record(out, (a,), lambda g: (2.0 * g * a.values,))


def power(a: Tensor, p: int) -> Tensor:
    if p == 1:
        return a
    out = Tensor(a.values ** p)
    return _record(out, (a,), lambda g: (p * g * a.values ** (p - 1),))


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.values))
    return _record(out, (a,), lambda g: (-g * np.sin(a.values),))


def softplus(a: Tensor) -> Tensor:
    x = a.values
    out = Tensor(np.logaddexp(0.0, x))
    return _record(out, (a,), lambda g: (g * _sigmoid(x),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    out = Tensor(a.values * mask, _check=False)
    return _record(out, (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.values), _check=False)
    return _record(out, (a,), lambda g: (g * (1.0 - out.values ** 2),))


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    out = Tensor(np.sum(a.values))
    return _record(out, (a,), lambda g: (np.full(a.shape, g[0, 0]),))


def sum_rows(a: Tensor) -> Tensor:
    """Column sums, shape (1, m)."""
    out = Tensor(a.values.sum(axis=0, keepdims=True))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_cols(a: Tensor) -> Tensor:
    """Row sums, shape (n, 1)."""
    out = Tensor(a.values.sum(axis=1, keepdims=True))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_rows(a: Tensor) -> Tensor:
    n = a.shape[0]
    out = Tensor(a.values.mean(axis=0, keepdims=True))
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),))


def vstack(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(_wrap(p) for p in parts)
    out = Tensor(np.vstack([p.values for p in parts]), _check=False)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def fn(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(out, parts, fn)


def rows(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.values[start:stop].copy(), _check=False)

    def fn(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _record(out, (a,), fn)


def eye_like(n: int, scale: float = 1.0) -> Tensor:
    return Tensor(np.eye(n) * scale)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# fused primitives used by the kernels


def sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances between rows, clamped at zero."""
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"row dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    av, bv = a.values, b.values
    d = (av * av).sum(1)[:, None] + (bv * bv).sum(1)[None, :] - 2.0 * av @ bv.T
    np.maximum(d, 0.0, out=d)
    if a is b:
        # exact zeros on the diagonal; the expansion above leaves roundoff there
        np.fill_diagonal(d, 0.0)
    out = Tensor(d)

    def fn(g):
        ga = 2.0 * (g.sum(1)[:, None] * av - g @ bv)
        gb = 2.0 * (g.sum(0)[:, None] * bv - g.T @ av)
        return ga, gb

    return _record(out, (a, b), fn)


def row_normalize(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Divide each row by (its norm + eps)."""
    x = a.values
    s = np.sqrt((x * x).sum(1, keepdims=True))
    den = s + eps
    out = Tensor(x / den)

    def fn(g):
        # d(x/(s+eps)) = dx/(s+eps) - x (x.dx) / (s (s+eps)^2); the second term -> 0 as s -> 0
        proj = (g * x).sum(1, keepdims=True)
        safe_s = np.where(s > 0, s, 1.0)
        coef = np.where(s > 0, proj / (safe_s * den * den), 0.0)
        return (g / den - coef * x,)

    return _record(out, (a,), fn)


def matern52_from_sqdist(d: Tensor, lengthscale: Tensor) -> Tensor:
    """Matern nu=5/2 covariance as a function of squared distance.

    Differentiated with respect to the squared distance directly so the
    gradient stays finite at zero distance.
    """
    l = lengthscale.item()
    r = np.sqrt(d.values) / l
    s5r = np.sqrt(5.0) * r
    e = np.exp(-s5r)
    out = Tensor((1.0 + s5r + 5.0 / 3.0 * r * r) * e)

    def fn(g):
        common = (5.0 / 3.0) * (1.0 + s5r) * e
        # dk/dd = -common / (2 l^2); dk/dl = common * r^2 / l
        gd = -g * common / (2.0 * l * l)
        gl = np.sum(g * common * r * r / l)
        return gd, np.array([[gl]])

    return _record(out, (d, lengthscale), fn)


def spectral_mixture_gram(a: Tensor, b: Tensor, weights: Tensor, means: Tensor,
                          scales: Tensor) -> Tensor:
    """sum_q w_q prod_p exp(-2 pi^2 tau_p^2 v_qp) cos(2 pi tau_p mu_qp), tau = a_i - b_j.

    ``weights`` is Q x 1, ``means`` and ``scales`` are Q x P (already constrained).
    """
    if a.shape[1] != b.shape[1] or means.shape[1] != a.shape[1]:
        raise ShapeError("spectral mixture dimensions disagree")
    tau = a.values[:, None, :] - b.values[None, :, :]            # n, m, P
    w = weights.values[:, 0]
    mu, v = means.values, scales.values                          # Q, P
    tau2 = tau * tau
    quad = np.einsum("nmp,qp->qnm", tau2, v)                     # Q, n, m
    env = np.exp(-2.0 * np.pi ** 2 * quad)
    phase = 2.0 * np.pi * tau[None, :, :, :] * mu[:, None, None, :]  # Q, n, m, P
    c = np.cos(phase)
    cprod = c.prod(axis=-1)                                      # Q, n, m
    comp = env * cprod
    out = Tensor(np.einsum("q,qnm->nm", w, comp))

    def fn(g):
        gw = np.einsum("nm,qnm->q", g, comp)[:, None]
        wg = w[:, None, None] * g[None]                          # Q, n, m
        # product of cosines with factor p left out, via prefix/suffix products
        P = c.shape[-1]
        ones = np.ones(c.shape[:-1] + (1,))
        prefix = np.concatenate([ones, np.cumprod(c[..., :-1], axis=-1)], axis=-1)
        suffix = np.concatenate([np.cumprod(c[..., :0:-1], axis=-1)[..., ::-1], ones], axis=-1)
        others = prefix * suffix if P > 1 else np.ones_like(c)
        dc = -np.sin(phase) * others                             # d cprod / d phase_p
        t_env = (wg * env)[..., None]                            # Q, n, m, 1
        t_comp = (wg * comp)[..., None]
        # d/d tau_p: envelope part and cosine part
        dtau = (t_comp * (-4.0 * np.pi ** 2) * v[:, None, None, :] * tau[None]
                + t_env * dc * (2.0 * np.pi) * mu[:, None, None, :]).sum(0)
        gmu = (t_env * dc * (2.0 * np.pi) * tau[None]).sum((1, 2))
        gv = (t_comp * (-2.0 * np.pi ** 2) * tau2[None]).sum((1, 2))
        ga = dtau.sum(1)
        gb = -dtau.sum(0)
        return ga, gb, gw, gmu, gv

    return _record(out, (a, b, weights, means, scales), fn)


# ---------------------------------------------------------------------------
# linear algebra


def cholesky(a: Tensor, sym_tol: float = 1e-10) -> Tensor:
    """Lower Cholesky factor with a differentiable adjoint.

    Raises NotPositiveDefinite when the matrix cannot be factorized; callers
    respond by increasing jitter.
    """
    A = a.values
    if A.shape[0] != A.shape[1]:
        raise ShapeError(f"cholesky needs a square matrix, got {A.shape}")
    if np.max(np.abs(A - A.T), initial=0.0) > sym_tol * max(1.0, np.max(np.abs(A), initial=0.0)):
        raise ValueError("cholesky input is not symmetric")
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    if not np.all(np.diag(L) > 0):
        raise NotPositiveDefinite("non-positive pivot")
    out = Tensor(L)

    def fn(g):
        # Abar = 1/2 L^-T Phi(L^T Lbar) L^-1, symmetrized; Phi = lower triangle, halved diagonal
        P = np.tril(L.T @ np.tril(g))
        P[np.diag_indices_from(P)] *= 0.5
        X = solve_triangular(L, P.T, lower=True, trans="T")        # L^-T P^T
        S = solve_triangular(L, X.T, lower=True, trans="T")        # L^-T (L^-T P^T)^T = L^-T P L^-1
        return (0.5 * (S + S.T),)

    return _record(out, (a,), fn)


def solve_cholesky(l: Tensor, b: Tensor) -> Tensor:
    """Solve (L L^T) x = b with two triangular solves."""
    L = l.values
    if L.shape[0] != L.shape[1] or L.shape[0] != b.shape[0]:
        raise ShapeError(f"solve_cholesky shapes disagree: {l.shape}, {b.shape}")
    if not np.all(np.diag(L) != 0):
        raise ZeroDivisionError("triangular factor has a zero on the diagonal")
    z = solve_triangular(L, b.values, lower=True)
    x = solve_triangular(L, z, lower=True, trans="T")
    out = Tensor(x)

    def fn(g):
        gb = solve_triangular(L, solve_triangular(L, g, lower=True), lower=True, trans="T")
        gl = -np.tril((gb @ x.T + x @ gb.T) @ L)
        return gl, gb

    return _record(out, (l, b), fn)


def logdet_from_chol(l: Tensor) -> Tensor:
    """log|L L^T| = 2 sum log L_ii."""
    d = np.diag(l.values)
    if not np.all(d > 0):
        raise ValueError("log-determinant needs a positive diagonal")
    out = Tensor(2.0 * np.sum(np.log(d)))

    def fn(g):
        return (np.diag(2.0 * g[0, 0] / d),)

    return _record(out, (l,), fn)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |central difference|).

    ``f`` rebuilds the scalar from the current values of ``params``. When
    ``max_entries`` is given, that many entries per parameter are probed at
    random instead of all of them.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    zero_grad(params)
    with GradTape() as tape:
        loss = f()
    base = loss.item()
    if not np.isfinite(base):
        raise NonFiniteError("function value is not finite")
    backward(tape, loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grad(params)

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.values.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("function value is not finite")
            fd = (fp - fm) / (2.0 * eps)
            err = abs(ga.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
