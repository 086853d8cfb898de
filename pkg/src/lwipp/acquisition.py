"""Acquisition functions for environment reconstruction.

Every ``acq_*`` function returns the quantity to be *maximized* (posterior
variance, integrated variance reduction, UCB/PI/EI in minimization-of-f
form). The mission minimizes ``criterion(...)``, which is the negation.
All functions are vectorized over rows of ``X``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .density import InputPrior, LikelihoodWeight, with_time

TAGS = ("US", "US-IW", "US-LW", "IVR", "IVR-IW", "IVR-LW", "UCB", "PI", "EI")
CLASSIC = ("UCB", "PI", "EI")
VAR_FLOOR = 1e-12  # relative to the signal variance
N_QUAD = 64
# integral of exp(-u'A^{-1}u/2) over the plane is GAUSS_NORM * sqrt(det A); kept
# as a module constant so the validation suite can detect a corrupted closed form
GAUSS_NORM = 2.0 * np.pi


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionKind:
    tag: str
    kappa: float | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ConfigurationError(f"unknown acquisition {self.tag!r}")
        if (self.tag in CLASSIC) != (self.kappa is not None):
            raise ConfigurationError("kappa is required for UCB/PI/EI and only for them")
        if self.kappa is not None and self.kappa < 0:
            raise ConfigurationError("kappa must be nonnegative")

    @property
    def weighting(self) -> str | None:
        if self.tag.endswith("-IW"):
            return "IW"
        if self.tag.endswith("-LW"):
            return "LW"
        return None

    def __str__(self):
        return self.tag


@dataclass
class AcquisitionContext:
    """Everything an acquisition needs at one decision epoch.

    ``t`` is the decision time; IVR integrals are taken over the unit square
    at that time.
    """

    model: object
    prior: InputPrior | None = None
    weight: LikelihoodWeight | None = None
    t: float | None = None
    y_star: float | None = None
    n_quad: int = N_QUAD

    def var_floor(self) -> float:
        return VAR_FLOOR * self.model.params.signal_variance


def quadrature_grid(n: int, lo=(0.0, 0.0), hi=(1.0, 1.0)):
    """Tensor Gauss-Legendre nodes and weights on a rectangle."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    u, wu = np.polynomial.legendre.leggauss(n)
    g1 = lo[0] + 0.5 * (u + 1) * (hi[0] - lo[0])
    g2 = lo[1] + 0.5 * (u + 1) * (hi[1] - lo[1])
    Z = np.stack(np.meshgrid(g1, g2, indexing="ij"), -1).reshape(-1, 2)
    W = np.outer(wu, wu).ravel() * 0.25 * float(np.prod(hi - lo))
    return Z, W


# -- uncertainty sampling ----------------------------------------------------


def acq_us(ctx: AcquisitionContext, X) -> np.ndarray:
    return ctx.model.var(X)


def acq_us_weighted(ctx: AcquisitionContext, X, mode: str) -> np.ndarray:
    X = np.atleast_2d(X)
    var = ctx.model.var(X)
    if mode == "IW":
        if ctx.prior is None:
            raise ConfigurationError("US-IW requires an input prior")
        return var * ctx.prior.pdf(X[:, :2])
    if mode == "LW":
        if ctx.weight is None:
            raise ConfigurationError("US-LW requires a likelihood weight")
        return var * ctx.weight.raw(ctx.model, X)
    raise ConfigurationError(f"unknown weighting {mode!r}")


# -- integrated variance reduction --------------------------------------------


def _ivr_quadrature(ctx, X, weight_fn, n_quad, lo=(0.0, 0.0), hi=(1.0, 1.0)):
    X = np.atleast_2d(X)
    model = ctx.model
    G, W = quadrature_grid(n_quad, lo, hi)
    wG = W * weight_fn(G) if weight_fn is not None else W
    keep = wG > 0
    G, wG = G[keep], wG[keep]
    Gx = with_time(G, ctx.t, model.dim)
    var = model.var(X)
    out = np.zeros(X.shape[0])
    ok = var > ctx.var_floor()
    if not np.any(ok):
        return out
    for idx in np.array_split(np.flatnonzero(ok), max(1, int(ok.sum()) // 256)):
        C = model.cov(X[idx], Gx)
        out[idx] = (C * C) @ wG / var[idx]
    return out


def acq_ivr(ctx: AcquisitionContext, X, n_quad: int | None = None) -> np.ndarray:
    """``(1/var(x)) * integral of cov^2(x, x')`` over the unit square."""
    return _ivr_quadrature(ctx, X, None, n_quad or ctx.n_quad)


def acq_ivr_weighted(ctx: AcquisitionContext, X, mode: str,
                     n_quad: int | None = None) -> np.ndarray:
    if mode == "IW":
        if ctx.prior is None:
            raise ConfigurationError("IVR-IW requires an input prior")
        return _ivr_quadrature(ctx, X, ctx.prior.pdf, n_quad or ctx.n_quad)
    if mode == "LW":
        if ctx.weight is None:
            raise ConfigurationError("IVR-LW requires a likelihood weight")
        return ivr_lw_analytic(ctx, X)
    raise ConfigurationError(f"unknown weighting {mode!r}")


def _time_factor(model, X, t):
    if model.dim == 2:
        return np.ones(X.shape[0])
    lt = model.params.lengthscales[2]
    return np.exp(-0.5 * (X[:, 2] - t) ** 2 / lt**2)


def _gmm_pair_integrals(Za, Zb, fa, fb, model, gmm):
    """``integral k(a, x') k(b, x') w_gmm(z') dz'`` for all pairs (a, b).

    ``x' = (z', t)`` at the decision time; ``fa``, ``fb`` carry the temporal
    kernel factors of ``a`` and ``b`` relative to that time.
    """
    p = model.params
    th = p.lengthscales[:2] ** 2
    diff = Za[:, None, :] - Zb[None, :, :]
    base = np.exp(-0.25 * (diff**2 / th).sum(-1))
    mid = 0.5 * (Za[:, None, :] + Zb[None, :, :])
    half = 0.5 * th
    mix = np.zeros(base.shape)
    for a, mean, S in zip(gmm.weights, gmm.means, gmm.covariances):
        S = S + np.diag(half)
        det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
        d0 = mid[..., 0] - mean[0]
        d1 = mid[..., 1] - mean[1]
        q = (S[1, 1] * d0 * d0 - 2 * S[0, 1] * d0 * d1 + S[0, 0] * d1 * d1) / det
        mix += a * np.exp(-0.5 * q) / (2.0 * np.pi * np.sqrt(det))
    norm = GAUSS_NORM * np.sqrt(np.prod(half))
    return p.signal_variance**2 * norm * base * mix * fa[:, None] * fb[None, :]


def ivr_lw_analytic(ctx: AcquisitionContext, X) -> np.ndarray:
    """IVR weighted by the GMM surrogate of the likelihood ratio, in closed form.

    With ``beta = K^{-1} k(X_train, x)`` the integrand expands as
    ``k(x,x')^2 - 2 beta_i k(x,x') k(x_i,x') + beta_i beta_j k(x_i,x') k(x_j,x')``;
    each product of two RBF kernels and a Gaussian component integrates to
    a Gaussian density evaluated at the pair midpoint. The integral runs
    over the whole plane, where the mixture is defined.
    """
    X = np.atleast_2d(X)
    model = ctx.model
    gmm = ctx.weight.gmm
    var = model.var(X)
    fq = _time_factor(model, X, ctx.t)
    Zq = X[:, :2]
    A = _gmm_self_integrals(Zq, fq, model, gmm)
    total = A
    if model.n > 0:
        Zd = model.X[:, :2]
        fd = _time_factor(model, model.X, ctx.t)
        beta = model.weights(X).T
        B = _gmm_pair_integrals(Zq, Zd, fq, fd, model, gmm)
        C = _gmm_pair_integrals(Zd, Zd, fd, fd, model, gmm)
        total = A - 2.0 * (B * beta).sum(1) + ((beta @ C) * beta).sum(1)
    out = np.zeros(X.shape[0])
    ok = var > ctx.var_floor()
    out[ok] = np.maximum(total[ok], 0.0) / var[ok]
    return out


def _gmm_self_integrals(Z, f, model, gmm):
    p = model.params
    half = 0.5 * p.lengthscales[:2] ** 2
    mix = np.zeros(Z.shape[0])
    for a, mean, S in zip(gmm.weights, gmm.means, gmm.covariances):
        S = S + np.diag(half)
        det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
        d0 = Z[:, 0] - mean[0]
        d1 = Z[:, 1] - mean[1]
        q = (S[1, 1] * d0 * d0 - 2 * S[0, 1] * d0 * d1 + S[0, 0] * d1 * d1) / det
        mix += a * np.exp(-0.5 * q) / (2.0 * np.pi * np.sqrt(det))
    norm = GAUSS_NORM * np.sqrt(np.prod(half))
    return p.signal_variance**2 * norm * mix * f**2


def gmm_box(gmm, n_std: float = 7.0):
    """Rectangle holding all but a negligible fraction of the mixture mass."""
    sd = np.sqrt(np.array([np.diag(S) for S in gmm.covariances]))
    lo = (gmm.means - n_std * sd).min(0)
    hi = (gmm.means + n_std * sd).max(0)
    return lo, hi


def ivr_lw_quadrature(ctx: AcquisitionContext, X, n_quad: int = 128) -> np.ndarray:
    """Reference IVR-LW by midpoint quadrature of ``cov^2 * w_gmm``."""
    lo, hi = gmm_box(ctx.weight.gmm)
    return _ivr_quadrature(ctx, X, ctx.weight.gmm, n_quad, lo, hi)


# -- optimization-oriented criteria -------------------------------------------


def _log_h(lam):
    """``log(lam * Phi(lam) + phi(lam))`` without underflow for very negative lam."""
    lam = np.asarray(lam, dtype=float)
    out = np.empty_like(lam)
    tail = lam < -25.0
    lt = lam[~tail]
    out[~tail] = np.log(lt * ndtr(lt) + np.exp(-0.5 * lt * lt) / np.sqrt(2 * np.pi))
    lt = lam[tail]
    inv2 = 1.0 / (lt * lt)
    out[tail] = (-0.5 * lt * lt - 0.5 * np.log(2 * np.pi) + np.log(inv2)
                 + np.log1p(-3 * inv2 + 15 * inv2**2 - 105 * inv2**3))
    return out


def acq_classic(ctx: AcquisitionContext, X, kind: str, kappa: float,
                log: bool = False) -> np.ndarray:
    """UCB, PI or EI for minimizing the field.

    ``lambda = (y* - mu - kappa) / sigma``; UCB is ``-mu + kappa sigma``.
    With ``log=True`` PI and EI are returned as logarithms, which keeps their
    ordering intact when the raw values underflow (large ``kappa``).
    """
    if ctx.y_star is None:
        raise ConfigurationError(f"{kind} requires a best observation y*")
    mu, var = ctx.model.mean_var(X)
    sigma = np.sqrt(var)
    if kind == "UCB":
        return -mu + kappa * sigma
    gain = ctx.y_star - mu - kappa
    ok = sigma > np.sqrt(ctx.var_floor())
    lam = np.where(ok, gain / np.where(ok, sigma, 1.0), 0.0)
    if kind == "PI":
        limit = (gain > 0).astype(float)
        if log:
            return np.where(ok, log_ndtr(lam), np.log(np.maximum(limit, 1e-300)))
        return np.where(ok, ndtr(lam), limit)
    if kind == "EI":
        limit = np.maximum(gain, 0.0)
        if log:
            return np.where(ok, np.log(np.where(ok, sigma, 1.0)) + _log_h(lam),
                            np.log(np.maximum(limit, 1e-300)))
        phi = np.exp(-0.5 * lam * lam) / np.sqrt(2 * np.pi)
        return np.where(ok, sigma * (lam * ndtr(lam) + phi), limit)
    raise ConfigurationError(f"unknown classic criterion {kind!r}")


# -- dispatch ----------------------------------------------------------------


def acquisition_value(kind: AcquisitionKind, ctx: AcquisitionContext, X) -> np.ndarray:
    """Value of ``kind`` at ``X`` (larger is better)."""
    tag = kind.tag
    if tag == "US":
        return acq_us(ctx, X)
    if tag in ("US-IW", "US-LW"):
        return acq_us_weighted(ctx, X, kind.weighting)
    if tag == "IVR":
        return acq_ivr(ctx, X)
    if tag in ("IVR-IW", "IVR-LW"):
        return acq_ivr_weighted(ctx, X, kind.weighting)
    return acq_classic(ctx, X, tag, kind.kappa, log=True)


def criterion(kind: AcquisitionKind, ctx: AcquisitionContext, X) -> np.ndarray:
    """The quantity the planner minimizes."""
    return -acquisition_value(kind, ctx, X)
