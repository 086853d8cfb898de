"""Output-density estimation, likelihood ratio and its Gaussian-mixture surrogate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.signal import fftconvolve

GRID_SIZE = 1024
DENSITY_FLOOR = 1e-9  # relative to the peak density
FLOOR_BANDWIDTH = 1e-6
COV_FLOOR = 1e-6
N_WEIGHT_SAMPLES = 10_000


# -- input prior -------------------------------------------------------------


@dataclass(frozen=True)
class InputPrior:
    """Spatial prior over the unit square: uniform or Gaussian."""

    kind: str = "uniform"
    mean: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    covariance: np.ndarray = field(default_factory=lambda: 0.01 * np.eye(2))

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        mean = np.asarray(self.mean, dtype=float).reshape(2)
        cov = np.asarray(self.covariance, dtype=float).reshape(2, 2)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        if self.kind == "gaussian":
            if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("prior covariance must be symmetric positive definite")

    @classmethod
    def uniform(cls) -> "InputPrior":
        return cls("uniform")

    @classmethod
    def gaussian(cls, mean, covariance) -> "InputPrior":
        return cls("gaussian", np.asarray(mean, float), np.asarray(covariance, float))

    def pdf(self, Z) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))[:, :2]
        if self.kind == "uniform":
            inside = np.all((Z >= 0.0) & (Z <= 1.0), axis=1)
            return inside.astype(float)
        return gaussian_pdf(Z, self.mean, self.covariance)

    def to_dict(self) -> dict:
        if self.kind == "uniform":
            return {"kind": "uniform"}
        return {"kind": "gaussian", "mean": self.mean.tolist(),
                "covariance": self.covariance.tolist()}


def gaussian_pdf(Z, mean, cov) -> np.ndarray:
    Z = np.atleast_2d(Z)
    L = linalg.cholesky(cov, lower=True)
    r = linalg.solve_triangular(L, (Z - mean).T, lower=True)
    d = Z.shape[1]
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return np.exp(-0.5 * (r * r).sum(0) - 0.5 * (d * np.log(2 * np.pi) + logdet))


# -- one-dimensional KDE -----------------------------------------------------


def silverman_bandwidth(samples) -> float:
    x = np.asarray(samples, dtype=float)
    n = x.size
    sd = x.std(ddof=1) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def kde_direct(samples, grid, h) -> np.ndarray:
    """Gaussian KDE evaluated pointwise; O(n m), used as a reference."""
    samples = np.asarray(samples, dtype=float)
    out = np.zeros(len(grid))
    for chunk in np.array_split(samples, max(1, samples.size // 2000)):
        u = (np.asarray(grid)[:, None] - chunk[None, :]) / h
        out += np.exp(-0.5 * u * u).sum(1)
    return out / (samples.size * h * np.sqrt(2 * np.pi))


def kde_on_grid(samples, grid, h) -> np.ndarray:
    """Gaussian KDE on a uniform grid via linear binning and FFT convolution.

    The binning grid is refined internally when the bandwidth is narrow
    compared to the output spacing.
    """
    samples = np.asarray(samples, dtype=float)
    grid = np.asarray(grid, dtype=float)
    lo = min(grid[0], samples.min())
    hi = max(grid[-1], samples.max())
    m = len(grid)
    if lo == grid[0] and hi == grid[-1] and (hi - lo) / (m - 1) <= h / 4:
        fine = grid
    else:
        m = min(max(int(np.ceil((hi - lo) / (h / 8))) + 1, m), 1 << 22)
        fine = np.linspace(lo, hi, m)
    delta = fine[1] - fine[0]
    pos = (samples - lo) / delta
    i0 = np.clip(np.floor(pos).astype(int), 0, m - 2)
    frac = pos - i0
    counts = np.bincount(i0, weights=1.0 - frac, minlength=m)
    counts += np.bincount(i0 + 1, weights=frac, minlength=m)
    half = min(m - 1, int(np.ceil(8 * h / delta)))
    u = np.arange(-half, half + 1) * delta / h
    kern = np.exp(-0.5 * u * u)
    dens = fftconvolve(counts, kern, mode="same")
    dens = np.maximum(dens, 0.0) / (samples.size * h * np.sqrt(2 * np.pi))
    if fine is grid:
        return dens
    return np.interp(grid, fine, dens)


@dataclass(frozen=True)
class OutputDensity:
    """Density of scalar outputs tabulated on a uniform grid."""

    grid: np.ndarray
    values: np.ndarray
    bandwidth: float
    floor: float

    def __call__(self, y) -> np.ndarray:
        v = np.interp(y, self.grid, self.values, left=self.floor, right=self.floor)
        return np.maximum(v, self.floor)

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))


def density_from_samples(samples, n_grid: int = GRID_SIZE,
                         rel_floor: float = DENSITY_FLOOR) -> OutputDensity:
    """KDE of 1-D samples on ``[min - 3h, max + 3h]`` with a relative floor."""
    samples = np.asarray(samples, dtype=float).ravel()
    h = silverman_bandwidth(samples)
    scale = max(1.0, float(np.abs(samples).max()))
    h = max(h, FLOOR_BANDWIDTH * scale)
    grid = np.linspace(samples.min() - 3 * h, samples.max() + 3 * h, n_grid)
    values = kde_on_grid(samples, grid, h)
    values /= np.trapezoid(values, grid)
    floor = rel_floor * values.max()
    values = np.maximum(values, floor)
    return OutputDensity(grid, values, h, floor)


def estimate_output_density(model, n_samples: int, t: float | None, rng=None,
                            return_samples: bool = False):
    """KDE of the posterior mean over uniform spatial samples at time ``t``."""
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    rng = np.random.default_rng(rng)
    Z = rng.uniform(size=(n_samples, 2))
    mu = model.mean(with_time(Z, t, model.dim))
    dens = density_from_samples(mu)
    if return_samples:
        return dens, Z, mu
    return dens


def with_time(Z, t, dim: int) -> np.ndarray:
    """Append the time coordinate when the model is spatiotemporal."""
    Z = np.atleast_2d(Z)
    if dim == 2:
        return Z
    return np.column_stack([Z, np.full(Z.shape[0], float(t))])


# -- Gaussian mixture --------------------------------------------------------


@dataclass(frozen=True)
class GmmSurrogate:
    """Weighted sum of Gaussians; ``weights`` carry the total mass."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    history: tuple = ()

    @property
    def n_components(self) -> int:
        return self.weights.size

    def __call__(self, Z) -> np.ndarray:
        Z = np.atleast_2d(Z)[:, : self.means.shape[1]]
        out = np.zeros(Z.shape[0])
        for a, m, S in zip(self.weights, self.means, self.covariances):
            out += a * gaussian_pdf(Z, m, S)
        return out

    def scaled(self, c: float) -> "GmmSurrogate":
        return GmmSurrogate(self.weights * c, self.means, self.covariances, self.history)


def _component_logpdf(X, mean, cov):
    L = linalg.cholesky(cov, lower=True)
    r = linalg.solve_triangular(L, (X - mean).T, lower=True)
    return -0.5 * (r * r).sum(0) - np.log(np.diag(L)).sum() - 0.5 * X.shape[1] * np.log(2 * np.pi)


def _floor_cov(S, floor):
    vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def fit_gmm(points, weights, n_components: int = 2, max_iter: int = 200, rng=None,
            tol: float = 1e-9, mass: float | None = None,
            cov_floor: float = COV_FLOOR) -> GmmSurrogate:
    """Weighted EM for a Gaussian mixture.

    Parameters
    ----------
    points : (n, d) array
    weights : (n,) array of nonnegative sample weights.
    n_components : int
    max_iter : int
    rng : seed or Generator used to pick initial means.
    mass : float, optional
        Total mass given to the mixture. Defaults to the mean weight, i.e.
        the Monte-Carlo integral of the weight when ``points`` are uniform
        over the unit square.

    Returns
    -------
    GmmSurrogate
        ``history`` holds the weighted log-likelihood after every iteration.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    w = np.asarray(weights, dtype=float).ravel()
    n, d = X.shape
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with positive total")
    if n < 10 * n_components:
        raise ValueError("need at least 10 samples per component")
    rng = np.random.default_rng(rng)
    if mass is None:
        mass = float(w.mean())
    p = w / w.sum()

    global_mean = p @ X
    global_cov = _floor_cov(((X - global_mean) * p[:, None]).T @ (X - global_mean), cov_floor)
    means = X[_seed_means(X, p, n_components, rng)]
    covs = np.array([global_cov.copy() for _ in range(n_components)])
    pis = np.full(n_components, 1.0 / n_components)
    reinit = np.zeros(n_components, dtype=bool)

    history = []
    prev = -np.inf
    for _ in range(max_iter):
        logp = np.column_stack(
            [np.log(pis[k]) + _component_logpdf(X, means[k], covs[k]) for k in range(n_components)]
        )
        lse = np.logaddexp.reduce(logp, axis=1)
        ll = float(p @ lse)
        history.append(ll)
        if ll - prev < tol * max(1.0, abs(ll)):
            break
        prev = ll
        resp = np.exp(logp - lse[:, None]) * p[:, None]
        nk = resp.sum(0)
        for k in range(n_components):
            if nk[k] <= 1e-12:
                # empty component: restart it at a fresh weighted draw
                means[k] = X[rng.choice(n, p=p)]
                covs[k] = global_cov
                pis[k] = 1.0 / n_components
                continue
            mk = resp[:, k] @ X / nk[k]
            D = X - mk
            Sk = (D * resp[:, k, None]).T @ D / nk[k]
            if np.linalg.eigvalsh(Sk).min() < cov_floor:
                if not reinit[k]:
                    reinit[k] = True
                    means[k] = X[rng.choice(n, p=p)]
                    covs[k] = global_cov
                    continue
                Sk = _floor_cov(Sk, cov_floor)
            means[k], covs[k] = mk, Sk
        pis = np.maximum(nk, 1e-300)
        pis = pis / pis.sum()
    return GmmSurrogate(pis * mass, means.copy(), covs.copy(), tuple(history))


def _seed_means(X, p, k, rng):
    """Weighted k-means++ seeding."""
    idx = [rng.choice(X.shape[0], p=p)]
    for _ in range(1, k):
        d2 = np.min([((X - X[i]) ** 2).sum(1) for i in idx], axis=0)
        q = p * d2
        if q.sum() <= 0:
            q = p
        idx.append(rng.choice(X.shape[0], p=q / q.sum()))
    return np.array(idx)


# -- likelihood weight -------------------------------------------------------


@dataclass(frozen=True)
class LikelihoodWeight:
    """Likelihood ratio ``p_x(x) / p_mu(mu(x))`` and its mixture surrogate."""

    prior: InputPrior
    out_density: OutputDensity
    gmm: GmmSurrogate
    sample_count: int
    t: float | None = None

    def raw(self, model, X) -> np.ndarray:
        X = np.atleast_2d(X)
        return self.prior.pdf(X[:, :2]) / self.out_density(model.mean(X))


def likelihood_ratio(lw: LikelihoodWeight, model, x) -> np.ndarray:
    return lw.raw(model, x)


def refresh_weight(model, prior: InputPrior, t: float | None, n_samples: int = N_WEIGHT_SAMPLES,
                   n_components: int = 2, rng=None) -> LikelihoodWeight:
    """Re-estimate ``p_mu``, evaluate the likelihood ratio and fit its GMM."""
    rng = np.random.default_rng(rng)
    dens, Z, mu = estimate_output_density(model, n_samples, t, rng=rng, return_samples=True)
    w = prior.pdf(Z) / dens(mu)
    gmm = fit_gmm(Z, w, n_components=n_components, rng=rng)
    return LikelihoodWeight(prior, dens, gmm, n_samples, t)
