"""Reconstruction metrics and cross-replicate aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .density import kde_on_grid, silverman_bandwidth, with_time

METRICS = ("rmse", "pdfe", "dist_to_min", "regret")
PDFE_FLOOR = 1e-12
N_PROBES = 100_000
_PHI3 = np.exp(-4.5) / np.sqrt(2 * np.pi)


class AlignmentError(ValueError):
    pass


def make_probes(n: int = N_PROBES, rng=None) -> np.ndarray:
    return np.random.default_rng(rng).uniform(size=(n, 2))


def field_values(env, probes, t) -> np.ndarray:
    return env.eval(probes, np.full(len(probes), float(t)))


def model_values(model, probes, t, chunk: int = 20_000) -> np.ndarray:
    out = np.empty(len(probes))
    for i in range(0, len(probes), chunk):
        out[i:i + chunk] = model.mean(with_time(probes[i:i + chunk], t, model.dim))
    return out


def rmse(env, model, t, probes) -> float:
    f = field_values(env, probes, t)
    mu = model_values(model, probes, t)
    return rmse_values(f, mu)


def rmse_values(f, mu) -> float:
    return float(np.sqrt(np.mean((np.asarray(f) - np.asarray(mu)) ** 2)))


def _bandwidth(x, scale):
    return max(silverman_bandwidth(x), 1e-6 * scale)


def pdfe_values(f, mu, n_grid: int = 1024, return_info: bool = False):
    """Integrated absolute difference of log densities of two samples.

    Both samples are smoothed by Gaussian KDE on a shared grid. Each density
    is floored at the height a single sample's kernel reaches three
    bandwidths away (and never below ``PDFE_FLOOR``). The integral runs over
    the grid points where at least one density clears its floor, so mass
    that one sample places where the other has none is penalized rather
    than cut out.

    With ``return_info`` the integration range ``(a, b)`` and the two floors
    are returned as well.
    """
    f = np.asarray(f, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    if np.ptp(f) == 0 and np.ptp(mu) == 0 and f[0] == mu[0]:
        info = {"range": (f[0], f[0]), "floors": (PDFE_FLOOR, PDFE_FLOOR)}
        return (0.0, info) if return_info else 0.0
    scale = max(1.0, np.abs(f).max(), np.abs(mu).max())
    # no kernel narrower than the grid spacing, so spikes stay visible
    spacing = (max(f.max(), mu.max()) - min(f.min(), mu.min())) / (n_grid - 7)
    hf = max(_bandwidth(f, scale), spacing)
    hm = max(_bandwidth(mu, scale), spacing)
    h = max(hf, hm)
    lo = min(f.min(), mu.min()) - 3 * h
    hi = max(f.max(), mu.max()) + 3 * h
    grid = np.linspace(lo, hi, n_grid)
    ff = max(PDFE_FLOOR, _PHI3 / (f.size * hf))
    fm = max(PDFE_FLOOR, _PHI3 / (mu.size * hm))
    pf = np.maximum(kde_on_grid(f, grid, hf), ff)
    pm = np.maximum(kde_on_grid(mu, grid, hm), fm)
    mask = (pf > ff) | (pm > fm)
    diff = np.where(mask, np.abs(np.log(pf) - np.log(pm)), 0.0)
    val = float(np.trapezoid(diff, grid))
    if return_info:
        idx = np.flatnonzero(mask)
        ab = (float(grid[idx[0]]), float(grid[idx[-1]])) if idx.size else (lo, hi)
        return val, {"range": ab, "floors": (ff, fm)}
    return val


def pdfe(env, model, t, probes) -> float:
    return pdfe_values(field_values(env, probes, t), model_values(model, probes, t))


def extremum_values(f, mu, probes):
    """Squared distance between minimizers and simple regret (as a magnitude)."""
    i_true = int(np.argmin(f))
    i_model = int(np.argmin(mu))
    ell = float(np.sum((probes[i_true] - probes[i_model]) ** 2))
    r = float(abs(f[i_true] - f[i_model]))
    return ell, r


def extremum_metrics(env, model, t, probes):
    f = field_values(env, probes, t)
    mu = model_values(model, probes, t)
    return extremum_values(f, mu, probes)


def all_metrics(f, mu, probes) -> dict:
    ell, r = extremum_values(f, mu, probes)
    return {"rmse": rmse_values(f, mu), "pdfe": pdfe_values(f, mu),
            "dist_to_min": ell, "regret": r}


# -- aggregation ---------------------------------------------------------------


def cumulative_min(series) -> np.ndarray:
    return np.minimum.accumulate(np.asarray(series, dtype=float))


def mad(x, axis=0) -> np.ndarray:
    med = np.median(x, axis=axis, keepdims=True)
    return np.median(np.abs(x - med), axis=axis)


@dataclass
class AggregateSeries:
    epoch: np.ndarray
    clock: np.ndarray
    median: dict
    band: dict
    n_replicates: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "clock", "metric", "median", "band"])
        for name in self.median:
            for k in range(self.epoch.size):
                w.writerow([int(self.epoch[k]), repr(float(self.clock[k])), name,
                            repr(float(self.median[name][k])), repr(float(self.band[name][k]))])
        return buf.getvalue()


def aggregate(traces, metrics=METRICS) -> AggregateSeries:
    """Median of the cumulative minimum across replicates with a MAD/4 band.

    ``traces`` is a list of replicate traces, each a list of epoch records
    holding ``epoch``, ``clock`` and the metric values. Replicates are
    truncated to the shortest one.
    """
    if len(traces) < 2:
        raise AlignmentError("aggregation needs at least two replicates")
    for tr in traces:
        ep = [rec["epoch"] for rec in tr]
        if ep != list(range(len(ep))):
            raise AlignmentError("epoch indices must run 0, 1, 2, ... in every replicate")
    n = min(len(tr) for tr in traces)
    if n == 0:
        raise AlignmentError("empty trace")
    clock = np.median([[rec["clock"] for rec in tr[:n]] for tr in traces], axis=0)
    med, band = {}, {}
    for name in metrics:
        cm = np.array([cumulative_min([rec[name] for rec in tr[:n]]) for tr in traces])
        med[name] = np.median(cm, axis=0)
        band[name] = mad(cm, axis=0) / 4.0
    return AggregateSeries(np.arange(n), clock, med, band, len(traces))


def final_cummin(trace, name: str) -> float:
    return float(cumulative_min([rec[name] for rec in trace])[-1])
