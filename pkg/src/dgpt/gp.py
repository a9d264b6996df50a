"""Exact Gaussian-process regression with a squared-exponential kernel.

Everything here is a pure function of its arguments. Hyperparameters are
optimised in log space; gradients are returned in the order
``(output_variance, length_scales..., noise_variance)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.optimize import minimize

LOG_2PI = np.log(2.0 * np.pi)

# box bounds on every hyperparameter, natural units
HYPER_LOWER = 1e-4
HYPER_UPPER = 1e6

JITTER_START = 1e-10
JITTER_ATTEMPTS = 6


class NumericalError(ArithmeticError):
    """Cholesky factorisation failed even after jitter escalation."""

    def __init__(self, message: str, jitters: Sequence[float] = ()):
        super().__init__(message)
        self.jitters = list(jitters)


@dataclass(frozen=True)
class Hyperparameters:
    output_variance: float
    length_scales: tuple[float, ...]
    noise_variance: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        object.__setattr__(self, "length_scales", ls)
        object.__setattr__(self, "output_variance", float(self.output_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        if not ls:
            raise ValueError("at least one length-scale is required")
        values = (self.output_variance, self.noise_variance) + ls
        if not all(np.isfinite(v) and v > 0 for v in values):
            raise ValueError(f"hyperparameters must be positive and finite, got {values}")

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def to_log(self) -> np.ndarray:
        return np.log([self.output_variance, *self.length_scales, self.noise_variance])

    @classmethod
    def from_log(cls, log_params) -> "Hyperparameters":
        p = np.exp(np.asarray(log_params, dtype=float))
        return cls(p[0], tuple(p[1:-1]), p[-1])

    def with_noise(self, noise_variance: float) -> "Hyperparameters":
        return Hyperparameters(self.output_variance, self.length_scales, noise_variance)


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    outputs: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=float)
        z = np.asarray(self.outputs, dtype=float).reshape(-1)
        if X.ndim == 1:
            X = X.reshape(len(z), -1) if len(z) else X.reshape(0, max(X.size, 1))
        if X.ndim != 2 or X.shape[0] != z.shape[0]:
            raise ValueError(f"inputs {X.shape} do not match outputs {z.shape}")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", z)

    @classmethod
    def empty(cls, dim: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0))

    def __len__(self) -> int:
        return self.outputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


class Prediction(NamedTuple):
    mean: float
    variance: float


def _check_dim(d: int, h: Hyperparameters) -> None:
    if d != h.dim:
        raise ValueError(f"input dimension {d} does not match {h.dim} length-scales")


def sq_exp_kernel(a, b, h: Hyperparameters) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise ValueError(f"kernel arguments differ in shape: {a.shape} vs {b.shape}")
    _check_dim(a.shape[0], h)
    r2 = np.sum(((a - b) / np.asarray(h.length_scales)) ** 2)
    return float(h.output_variance * np.exp(-0.5 * r2))


def kernel_matrix(A, B, h: Hyperparameters) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"column dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    _check_dim(A.shape[1], h)
    ls = np.asarray(h.length_scales)
    As, Bs = A / ls, B / ls
    r2 = (
        np.sum(As**2, axis=1)[:, None]
        + np.sum(Bs**2, axis=1)[None, :]
        - 2.0 * As @ Bs.T
    )
    np.maximum(r2, 0.0, out=r2)
    if A is B or (A.shape == B.shape and np.array_equal(A, B)):
        np.fill_diagonal(r2, 0.0)
    r2 *= -0.5
    np.exp(r2, out=r2)
    r2 *= h.output_variance
    return r2


def cholesky_jitter(S: np.ndarray, scale: float) -> np.ndarray:
    """Lower Cholesky factor of ``S``, escalating diagonal jitter on failure.

    The plain matrix is tried first, then ``JITTER_START * scale`` growing by a
    factor 10 for at most ``JITTER_ATTEMPTS`` attempts.
    """
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    tried = []
    jitter = JITTER_START * scale
    eye = np.eye(S.shape[0])
    for _ in range(JITTER_ATTEMPTS):
        tried.append(jitter)
        try:
            return np.linalg.cholesky(S + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError(f"covariance not positive definite, jitters tried: {tried}", tried)


def _factor(train: Dataset, h: Hyperparameters):
    K = kernel_matrix(train.inputs, train.inputs, h)
    S = K.copy()
    S[np.diag_indices_from(S)] += h.noise_variance
    L = cholesky_jitter(S, h.output_variance)
    del S
    return K, L


def _solve_lower(L, b):
    return solve_triangular(L, b, lower=True, check_finite=False)


def gp_predict(train: Dataset, test_input, h: Hyperparameters) -> Prediction:
    x = np.atleast_1d(np.asarray(test_input, dtype=float))
    _check_dim(x.shape[0], h)
    prior = h.output_variance
    if len(train) == 0:
        return Prediction(0.0, prior)
    _check_dim(train.dim, h)
    _, L = _factor(train, h)
    ks = kernel_matrix(train.inputs, x[None, :], h)[:, 0]
    v = _solve_lower(L, ks)
    w = _solve_lower(L, train.outputs)
    mean = float(v @ w)
    var = prior - float(v @ v)
    return Prediction(mean, max(var, 0.0))


def log_marginal_likelihood(train: Dataset, h: Hyperparameters) -> float:
    if len(train) == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    _check_dim(train.dim, h)
    _, L = _factor(train, h)
    w = _solve_lower(L, train.outputs)
    n = len(train)
    return float(-0.5 * w @ w - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)


def lml_and_gradient(train: Dataset, h: Hyperparameters, chunk: int = 1024):
    """Log marginal likelihood and its gradient w.r.t. log-hyperparameters.

    Works in row chunks for the length-scale terms so large ``n`` only holds
    two dense n-by-n arrays (kernel and weight matrix) at a time.
    """
    if len(train) == 0:
        raise ValueError("log marginal likelihood needs at least one observation")
    _check_dim(train.dim, h)
    X, z = train.inputs, train.outputs
    n = len(train)
    K, L = _factor(train, h)
    alpha = cho_solve((L, True), z, check_finite=False)
    lml = -0.5 * z @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI

    # W = alpha alpha^T - Sigma^{-1}, built in place on the inverse; L.T is
    # F-contiguous so dpotri works without copying
    inv, info = lapack.dpotri(L.T, lower=0, overwrite_c=1)
    del L
    if info != 0:
        raise NumericalError(f"dpotri failed with info={info}")
    W = inv.T
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        blk = W[s:e, s:e]
        W[s:e, s:e] = np.tril(blk) + np.tril(blk, -1).T
        W[s:e, e:] = W[e:, s:e].T
    W *= -1.0
    for s in range(0, n, chunk):
        W[s : s + chunk] += alpha[s : s + chunk, None] * alpha[None, :]

    grad = np.empty(h.dim + 2)
    grad[0] = 0.5 * np.einsum("ij,ij->", W, K)
    ls = np.asarray(h.length_scales)
    for j in range(h.dim):
        col = X[:, j] / ls[j]
        acc = 0.0
        for s in range(0, n, chunk):
            D = (col[s : s + chunk, None] - col[None, :]) ** 2
            D *= K[s : s + chunk]
            acc += np.einsum("ij,ij->", W[s : s + chunk], D)
        grad[1 + j] = 0.5 * acc
    grad[-1] = 0.5 * h.noise_variance * np.trace(W)
    return float(lml), grad


def lml_gradient(train: Dataset, h: Hyperparameters) -> np.ndarray:
    return lml_and_gradient(train, h)[1]


# -- batched evaluation over many small datasets ------------------------------


def stack_datasets(datasets: Sequence[Dataset]):
    """Pad non-empty datasets into ``(M, n_max, d)`` arrays plus a validity mask."""
    live = [d for d in datasets if len(d)]
    if not live:
        raise ValueError("all datasets are empty")
    dim = live[0].dim
    n_max = max(len(d) for d in live)
    X = np.zeros((len(live), n_max, dim))
    z = np.zeros((len(live), n_max))
    mask = np.zeros((len(live), n_max), dtype=bool)
    for i, d in enumerate(live):
        if d.dim != dim:
            raise ValueError("datasets disagree on input dimension")
        k = len(d)
        X[i, :k] = d.inputs
        z[i, :k] = d.outputs
        mask[i, :k] = True
    return X, z, mask


def batched_lml_and_gradient(X, z, mask, log_params, with_grad: bool = True):
    """Summed LML (and log-space gradient) of padded independent datasets.

    Padded rows get unit diagonal, zero off-diagonal covariance and zero output,
    so they contribute nothing to either the value or the gradient.
    """
    p = np.exp(log_params)
    s2, ls, noise = p[0], p[1:-1], p[-1]
    M, n, d = X.shape
    Xs = X / ls
    diff = Xs[:, :, None, :] - Xs[:, None, :, :]
    D = diff**2
    K = s2 * np.exp(-0.5 * D.sum(-1))
    pair = mask[:, :, None] & mask[:, None, :]
    K = np.where(pair, K, 0.0)
    eye = np.eye(n)
    S = K + eye * np.where(mask, noise, 1.0)[:, :, None]
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        L = None
        for i in range(M):
            S[i] = cholesky_jitter(S[i], s2)
        L = S
    Linv = np.linalg.solve(L, np.broadcast_to(eye, L.shape))
    w = np.einsum("mij,mj->mi", Linv, z)
    count = mask.sum()
    lml = -0.5 * np.sum(w * w) - np.sum(np.log(np.diagonal(L, axis1=1, axis2=2))) - 0.5 * count * LOG_2PI
    if not with_grad:
        return float(lml), None
    Sinv = np.einsum("mki,mkj->mij", Linv, Linv)
    alpha = np.einsum("mki,mk->mi", Linv, w)
    W = alpha[:, :, None] * alpha[:, None, :] - Sinv
    grad = np.empty(d + 2)
    grad[0] = 0.5 * np.sum(W * K)
    WK = W * K
    for j in range(d):
        grad[1 + j] = 0.5 * np.sum(WK * D[..., j])
    diagW = np.diagonal(W, axis1=1, axis2=2)
    grad[-1] = 0.5 * noise * np.sum(np.where(mask, diagW, 0.0))
    return float(lml), grad


# -- hyperparameter optimisation ----------------------------------------------

STANDARD = "standard"
FACTORIZED = "factorized"


def optimize_hyperparameters(
    datasets: Sequence[Dataset],
    init: Hyperparameters,
    objective: str = FACTORIZED,
    max_iter: int = 200,
    learn_noise: bool = True,
    extra_inits: Sequence[Hyperparameters] = (),
) -> Hyperparameters:
    """Maximise the (factorised) log marginal likelihood from ``init``.

    L-BFGS-B in log space within ``[HYPER_LOWER, HYPER_UPPER]``; stops when
    the projected-gradient infinity norm drops below 1e-4 or the relative
    objective change below 1e-8. Each of ``extra_inits`` is a further start
    (same iteration cap); the best point evaluated over all starts is
    returned, so the result is never worse than ``init``.
    """
    if objective not in (STANDARD, FACTORIZED):
        raise ValueError(f"unknown objective {objective!r}")
    datasets = list(datasets)
    if objective == STANDARD and len(datasets) != 1:
        raise ValueError("standard objective takes exactly one (pooled) dataset")
    X, z, mask = stack_datasets(datasets)
    _check_dim(X.shape[2], init)

    lo, hi = np.log(HYPER_LOWER), np.log(HYPER_UPPER)
    x0_full = np.clip(init.to_log(), lo, hi)
    free = np.ones(x0_full.size, dtype=bool)
    if not learn_noise:
        free[-1] = False
        x0_full[-1] = np.log(init.noise_variance)

    best = {"f": -np.inf, "x": x0_full.copy()}

    def fun(xf):
        full = x0_full.copy()
        full[free] = xf
        try:
            f, g = batched_lml_and_gradient(X, z, mask, full)
        except NumericalError:
            return 1e300, np.zeros(xf.size)
        if f > best["f"]:
            best["f"], best["x"] = f, full.copy()
        return -f, -g[free]

    f0, _ = fun(x0_full[free])
    if f0 >= 1e300:
        raise NumericalError("objective cannot be evaluated at the initial point")
    starts = [x0_full[free]]
    for h in extra_inits:
        _check_dim(X.shape[2], h)
        starts.append(np.clip(h.to_log(), lo, hi)[free])
    if max_iter > 0:
        for x0 in starts:
            minimize(
                fun,
                x0,
                jac=True,
                method="L-BFGS-B",
                bounds=[(lo, hi)] * int(free.sum()),
                options={"maxiter": max_iter, "gtol": 1e-4, "ftol": 1e-8},
            )
    return Hyperparameters.from_log(best["x"])
