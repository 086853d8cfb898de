"""Exact Gaussian-process regression with an anisotropic RBF kernel."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize

JITTER_START = 1e-10
JITTER_MAX = 1e-4
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
SIGNAL_BOUNDS = (1e-6, 1e3)
NOISE_BOUNDS = (1e-8, 1.0)


class ContractError(ValueError):
    """Raised when inputs violate a documented precondition."""


class NotPSDError(linalg.LinAlgError):
    """Raised when the covariance cannot be factored even with maximal jitter."""


class GpFitError(RuntimeError):
    """Raised when every restart of the likelihood optimizer fails."""


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the RBF-ARD kernel.

    ``lengthscales`` holds one lengthscale per input dimension; the kernel
    divides squared distances by ``lengthscales**2``.
    """

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ls)
        if not self.signal_variance > 0:
            raise ContractError("signal_variance must be strictly positive")
        if np.any(ls <= 0):
            raise ContractError("lengthscales must be strictly positive")
        if self.noise_variance < 0:
            raise ContractError("noise_variance must be nonnegative")

    @property
    def dim(self) -> int:
        return self.lengthscales.size

    def to_log(self) -> np.ndarray:
        return np.concatenate(
            [[np.log(self.signal_variance)], np.log(self.lengthscales),
             [np.log(max(self.noise_variance, 1e-300))]]
        )

    @classmethod
    def from_log(cls, theta) -> "KernelParams":
        theta = np.asarray(theta, dtype=float)
        return cls(float(np.exp(theta[0])), np.exp(theta[1:-1]), float(np.exp(theta[-1])))


def _check_dim(p: KernelParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != p.dim:
        raise ContractError(
            f"input dimension {X.shape[1]} does not match {p.dim} lengthscales"
        )
    return X


def sq_dist(X1, X2, lengthscales) -> np.ndarray:
    """Scaled squared distances ``sum_d (x_d - x'_d)^2 / l_d^2``."""
    A = X1 / lengthscales
    B = X2 / lengthscales
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def kernel(p: KernelParams, X1, X2) -> np.ndarray:
    """Kernel matrix ``k(X1, X2)`` without the noise term."""
    X1 = _check_dim(p, X1)
    X2 = _check_dim(p, X2)
    return p.signal_variance * np.exp(-0.5 * sq_dist(X1, X2, p.lengthscales))


def kernel_eval(p: KernelParams, x, x2) -> float:
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.size != p.dim or x2.size != p.dim:
        raise ContractError("input dimension does not match lengthscales")
    r = (x - x2) / p.lengthscales
    return float(p.signal_variance * np.exp(-0.5 * r @ r))


def _jittered_cholesky(K: np.ndarray, scale: float) -> np.ndarray:
    """Cholesky factor of ``K``, adding diagonal jitter only when plain factoring fails."""
    try:
        return linalg.cholesky(K, lower=True)
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START
    n = K.shape[0]
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return linalg.cholesky(K + jitter * scale * np.eye(n), lower=True)
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NotPSDError("covariance matrix is not positive definite after jitter escalation")


@dataclass(frozen=True)
class GpModel:
    """A GP conditioned on a dataset.

    Observations are stored relative to ``offset``, which is added back to
    the posterior mean.
    """

    params: KernelParams
    X: np.ndarray
    y: np.ndarray
    offset: float = 0.0
    chol: np.ndarray = field(default=None, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.params.dim

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def mean(self, Xq) -> np.ndarray:
        Xq = _check_dim(self.params, Xq)
        if self.n == 0:
            return np.full(Xq.shape[0], self.offset)
        return self.offset + kernel(self.params, Xq, self.X) @ self.alpha

    def _whitened(self, Xq) -> np.ndarray:
        return linalg.solve_triangular(
            self.chol, kernel(self.params, self.X, Xq), lower=True, check_finite=False
        )

    def var(self, Xq) -> np.ndarray:
        Xq = _check_dim(self.params, Xq)
        sf2 = self.params.signal_variance
        if self.n == 0:
            return np.full(Xq.shape[0], sf2)
        V = self._whitened(Xq)
        return np.clip(sf2 - (V * V).sum(0), 0.0, sf2)

    def mean_var(self, Xq):
        Xq = _check_dim(self.params, Xq)
        sf2 = self.params.signal_variance
        if self.n == 0:
            return np.full(Xq.shape[0], self.offset), np.full(Xq.shape[0], sf2)
        Kq = kernel(self.params, self.X, Xq)
        V = linalg.solve_triangular(self.chol, Kq, lower=True, check_finite=False)
        return self.offset + Kq.T @ self.alpha, np.clip(sf2 - (V * V).sum(0), 0.0, sf2)

    def cov(self, X1, X2) -> np.ndarray:
        X1 = _check_dim(self.params, X1)
        X2 = _check_dim(self.params, X2)
        K12 = kernel(self.params, X1, X2)
        if self.n == 0:
            return K12
        return K12 - self._whitened(X1).T @ self._whitened(X2)

    def weights(self, Xq) -> np.ndarray:
        """``K^{-1} k(X, Xq)``, one column per query."""
        Xq = _check_dim(self.params, Xq)
        if self.n == 0:
            return np.zeros((0, Xq.shape[0]))
        return linalg.cho_solve((self.chol, True), kernel(self.params, self.X, Xq),
                                check_finite=False)

    def add_data(self, Xn, yn) -> "GpModel":
        """Fold new observations into the posterior; hyperparameters unchanged."""
        Xn = _check_dim(self.params, Xn)
        X = np.vstack([self.X, Xn])
        y_raw = np.concatenate([self.y + self.offset, np.ravel(yn)])
        return condition(self.params, X, y_raw, offset=self.offset)

    def log_marginal_likelihood(self) -> float:
        if self.n == 0:
            return 0.0
        return float(-0.5 * self.y @ self.alpha - np.log(np.diag(self.chol)).sum()
                     - 0.5 * self.n * np.log(2 * np.pi))


def condition(params: KernelParams, X, y, offset: float = 0.0) -> GpModel:
    """Build the posterior of a zero-mean GP (shifted by ``offset``) given data."""
    X = np.asarray(X, dtype=float).reshape(-1, params.dim)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ContractError("inputs and outputs have different lengths")
    yc = y - offset
    if X.shape[0] == 0:
        return GpModel(params, X, yc, offset, np.zeros((0, 0)), np.zeros(0))
    K = kernel(params, X, X) + params.noise_variance * np.eye(X.shape[0])
    L = _jittered_cholesky(K, params.signal_variance)
    alpha = linalg.cho_solve((L, True), yc, check_finite=False)
    return GpModel(params, X, yc, offset, L, alpha)


def empty_model(params: KernelParams) -> GpModel:
    return condition(params, np.zeros((0, params.dim)), np.zeros(0))


def posterior_mean(m: GpModel, x) -> float:
    return float(m.mean(np.atleast_2d(x))[0])


def posterior_var(m: GpModel, x) -> float:
    return float(m.var(np.atleast_2d(x))[0])


def posterior_cov(m: GpModel, x, x2) -> float:
    return float(m.cov(np.atleast_2d(x), np.atleast_2d(x2))[0, 0])


def conditional_var(m: GpModel, x2, ghost, floor: float = 1e-12) -> float:
    """Variance at ``x2`` had a noiseless-in-model observation been made at ``ghost``.

    The ghost is treated like any other observation, so the model's noise
    variance applies to it.
    """
    v2 = posterior_var(m, x2)
    vg = posterior_var(m, ghost) + m.params.noise_variance
    if vg <= floor * m.params.signal_variance:
        return v2
    c = posterior_cov(m, ghost, x2)
    return float(min(v2, max(v2 - c * c / vg, 0.0)))


# -- marginal likelihood -----------------------------------------------------


def _scale(y: np.ndarray) -> float:
    v = float(np.var(y)) if y.size > 1 else 0.0
    return v if v > 1e-12 else 1.0


def log_bounds(dim: int, yscale: float) -> np.ndarray:
    lo_l, hi_l = np.log(LENGTHSCALE_BOUNDS)
    b = [(np.log(SIGNAL_BOUNDS[0] * yscale), np.log(SIGNAL_BOUNDS[1] * yscale))]
    b += [(lo_l, hi_l)] * dim
    b += [(np.log(NOISE_BOUNDS[0] * yscale), np.log(NOISE_BOUNDS[1] * yscale))]
    return np.array(b)


def neg_log_marginal_likelihood(theta, X, y, grad: bool = True):
    """Negative log marginal likelihood and its gradient in log-hyperparameters.

    ``theta = [log sf2, log l_1, ..., log l_d, log sn2]``; ``y`` is already
    centered.
    """
    theta = np.asarray(theta, dtype=float)
    sf2 = np.exp(theta[0])
    ls = np.exp(theta[1:-1])
    sn2 = np.exp(theta[-1])
    n, d = X.shape
    diffs = [(X[:, j, None] - X[None, :, j]) ** 2 / ls[j] ** 2 for j in range(d)]
    Kf = sf2 * np.exp(-0.5 * np.sum(diffs, axis=0))
    K = Kf + sn2 * np.eye(n)
    L = _jittered_cholesky(K, sf2)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    nll = 0.5 * y @ alpha + np.log(np.diag(L)).sum() + 0.5 * n * np.log(2 * np.pi)
    if not grad:
        return nll
    Kinv = linalg.cho_solve((L, True), np.eye(n), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    g = np.empty(theta.size)
    g[0] = 0.5 * np.sum(W * Kf)
    for j in range(d):
        g[1 + j] = 0.5 * np.sum(W * Kf * diffs[j])
    g[-1] = 0.5 * sn2 * np.trace(W)
    return nll, -g


def _random_init(rng, X, yscale, bounds) -> np.ndarray:
    d = X.shape[1]
    spans = np.maximum(np.ptp(X, axis=0), 1.0) if X.shape[0] else np.ones(d)
    theta = np.empty(d + 2)
    theta[0] = np.log(yscale) + rng.uniform(-1.0, 1.0)
    theta[1:-1] = np.log(spans) + rng.uniform(np.log(0.05), 0.0, size=d)
    theta[-1] = np.log(yscale) + rng.uniform(np.log(1e-6), np.log(1e-1))
    return np.clip(theta, bounds[:, 0], bounds[:, 1])


def fit(X, y, init: KernelParams | None = None, restarts: int = 10, rng=None,
        fixed=None, center: bool = True, gtol: float = 1e-6) -> GpModel:
    """Train hyperparameters by maximizing the log marginal likelihood.

    Parameters
    ----------
    X, y : array_like
        Training inputs ``(n, d)`` and outputs ``(n,)``.
    init : KernelParams, optional
        Starting point of the first restart; further restarts are drawn at
        random. Values outside the box bounds are clipped.
    restarts : int
        Number of optimizer runs (at least one).
    rng : numpy Generator, optional
        Source of random restart points.
    fixed : sequence of bool, optional
        Mask over lengthscales; masked entries keep their ``init`` value.
    center : bool
        Subtract the sample mean of ``y`` before fitting.

    Returns
    -------
    GpModel
        The best model across restarts.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] == 0:
        raise ContractError("cannot fit a GP to an empty dataset")
    if restarts < 1:
        raise ContractError("restarts must be at least 1")
    rng = np.random.default_rng(rng)
    d = X.shape[1]
    offset = float(y.mean()) if center else 0.0
    yc = y - offset
    yscale = _scale(y)
    bounds = log_bounds(d, yscale)

    fixed_mask = np.zeros(d + 2, dtype=bool)
    if fixed is not None:
        fixed_mask[1:-1] = np.asarray(fixed, dtype=bool)
        if init is None:
            raise ContractError("fixed lengthscales require init")
    theta_fixed = init.to_log() if init is not None else np.zeros(d + 2)
    free = ~fixed_mask
    b_free = bounds[free].copy()
    # fixed entries may sit outside the optimizer box
    bounds[fixed_mask] = theta_fixed[fixed_mask, None]

    starts = []
    if init is not None:
        if init.dim != d:
            raise ContractError("init dimension does not match data")
        starts.append(np.clip(init.to_log(), bounds[:, 0], bounds[:, 1]))
    while len(starts) < restarts:
        t0 = _random_init(rng, X, yscale, bounds)
        t0[fixed_mask] = theta_fixed[fixed_mask]
        starts.append(t0)

    def objective(tf):
        th = theta_fixed.copy()
        th[free] = tf
        try:
            f, g = neg_log_marginal_likelihood(th, X, yc)
        except NotPSDError:
            return 1e25, np.zeros(tf.size)
        if not np.isfinite(f):
            return 1e25, np.zeros(tf.size)
        return f, g[free]

    best_theta, best_f = None, np.inf
    for t0 in starts:
        f0, _ = objective(t0[free])
        if f0 < best_f:
            best_theta, best_f = t0.copy(), f0
        res = optimize.minimize(objective, t0[free], jac=True, method="L-BFGS-B",
                                bounds=b_free, options={"gtol": gtol, "maxiter": 500})
        if np.isfinite(res.fun) and res.fun < best_f:
            th = theta_fixed.copy()
            th[free] = res.x
            best_theta, best_f = th, float(res.fun)
    if best_theta is None or best_f >= 1e25:
        raise GpFitError("all likelihood restarts failed")
    params = KernelParams.from_log(best_theta)
    if fixed_mask.any():
        # keep masked lengthscales bit-exact rather than round-tripped through log
        ls = params.lengthscales.copy()
        ls[fixed_mask[1:-1]] = init.lengthscales[fixed_mask[1:-1]]
        params = KernelParams(params.signal_variance, ls, params.noise_variance)
    return condition(params, X, y, offset=offset)
