"""Exploration missions: next-best-view and informative path planning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import gp
from .acquisition import AcquisitionContext, AcquisitionKind, criterion
from .density import InputPrior, refresh_weight
from .metrics import METRICS, all_metrics, make_probes, model_values
from .planner import (Pose, admissible_destinations, candidate_paths, select_destination,
                      select_pointwise)

STATIC_MODES = ("spatiotemporal", "infinite-time-lengthscale", "no-time-variable")
INFINITE_LENGTHSCALE = 1e6
_TICK_TOL = 1e-9


class MissionAbort(RuntimeError):
    """The surrogate could not be trained; carries the offending epoch."""


@dataclass(frozen=True)
class MissionConfig:
    """Mission, planner and surrogate settings.

    ``acquisition`` is an :class:`AcquisitionKind` or a callable
    ``(ctx, X) -> values to minimize``.
    """

    duration: float = 15.0
    speed: float = 1.0
    sample_period: float = 1.0 / 15.0
    z0: tuple = (0.0, 0.0)
    theta0: float = np.pi / 4
    acquisition: object = field(default_factory=lambda: AcquisitionKind("US"))
    prior: InputPrior = field(default_factory=InputPrior.uniform)
    lookahead: float = 0.2
    half_angle: float = 3 * np.pi / 4
    turning_radius: float = 0.02
    n_candidates: int = 64
    n_path_samples: int = 16
    refit_every: int = 1
    gp_restarts: int = 3
    n_gmm: int = 2
    n_weight_samples: int = 10_000
    static_mode: str = "spatiotemporal"
    seed: int = 0
    n_probes: int = 100_000
    probe_seed: int = 12345

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be nonnegative")
        if self.sample_period <= 0 or self.speed <= 0:
            raise ValueError("sample period and speed must be positive")
        if self.static_mode not in STATIC_MODES:
            raise ValueError(f"static_mode must be one of {STATIC_MODES}")
        if self.refit_every < 1 or self.gp_restarts < 1:
            raise ValueError("refit_every and gp_restarts must be at least 1")
        if self.n_probes < 2:
            raise ValueError("n_probes must be at least 2")

    @property
    def acquisition_tag(self) -> str:
        a = self.acquisition
        return str(a) if isinstance(a, AcquisitionKind) else getattr(a, "__name__", "custom")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["z0"] = list(map(float, self.z0))
        d["acquisition"] = self.acquisition_tag
        if isinstance(self.acquisition, AcquisitionKind) and self.acquisition.kappa is not None:
            d["kappa"] = self.acquisition.kappa
        d["prior"] = self.prior.to_dict()
        return d


@dataclass(frozen=True)
class ModelSpec:
    dim: int
    init: gp.KernelParams
    fixed: tuple | None


def apply_static_mode(cfg: MissionConfig, spec: ModelSpec | None = None) -> ModelSpec:
    """Input dimension, initial hyperparameters and the MLE mask for ``cfg.static_mode``."""
    if cfg.static_mode == "no-time-variable":
        return ModelSpec(2, gp.KernelParams(1.0, np.array([0.2, 0.2]), 1e-2), None)
    ls = np.array([0.2, 0.2, 0.2 * max(cfg.duration, 1.0)])
    if spec is not None and spec.dim == 3:
        ls = np.array(spec.init.lengthscales, dtype=float)
    if cfg.static_mode == "infinite-time-lengthscale":
        ls[2] = INFINITE_LENGTHSCALE
        return ModelSpec(3, gp.KernelParams(1.0, ls, 1e-2), (False, False, True))
    return ModelSpec(3, gp.KernelParams(1.0, ls, 1e-2), None)


def _inputs(Z, t, dim):
    Z = np.atleast_2d(Z)
    if dim == 2:
        return Z.copy()
    return np.column_stack([Z, np.broadcast_to(np.asarray(t, float), (Z.shape[0],))])


class _Recorder:
    """Metric snapshots on a frozen probe set (static fields are cached)."""

    def __init__(self, env, cfg):
        self.env = env
        self.probes = make_probes(cfg.n_probes, rng=cfg.probe_seed)
        self._static = None if env.time_dependent else env.eval(self.probes, 0.0)

    def field(self, t):
        if self._static is not None:
            return self._static
        return self.env.eval(self.probes, np.full(len(self.probes), float(t)))

    def __call__(self, model, t) -> dict:
        return all_metrics(self.field(t), model_values(model, self.probes, t), self.probes)


class _Mission:
    def __init__(self, env, cfg: MissionConfig):
        self.env = env
        self.cfg = cfg
        ss = np.random.SeedSequence(cfg.seed)
        self.rng_plan, self.rng_noise, self.rng_gp, self.rng_lw = (
            np.random.default_rng(s) for s in ss.spawn(4)
        )
        self.spec = apply_static_mode(cfg)
        self.params = self.spec.init
        self.X = np.empty((0, self.spec.dim))
        self.y = np.empty(0)
        self.model = None
        self.weight = None
        self.record = _Recorder(env, cfg)
        self.trace = []
        self.epoch = 0
        self._since_fit = 0

    # measurements ---------------------------------------------------------

    def measure(self, Z, t):
        Z = np.clip(np.atleast_2d(Z), 0.0, 1.0)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        f = self.env.eval(Z, t)
        sd = np.sqrt(self.env.noise_variance)
        y = f + sd * self.rng_noise.standard_normal(f.size) if sd > 0 else f
        self.X = np.vstack([self.X, _inputs(Z, t, self.spec.dim)])
        self.y = np.concatenate([self.y, y])
        return y

    # surrogate ------------------------------------------------------------

    def refit(self):
        cfg = self.cfg
        self._since_fit += 1
        if self.model is not None and self._since_fit < cfg.refit_every:
            n_old = self.model.n
            self.model = self.model.add_data(self.X[n_old:], self.y[n_old:])
            return
        self._since_fit = 0
        try:
            self.model = gp.fit(self.X, self.y, init=self.params, restarts=cfg.gp_restarts,
                                rng=self.rng_gp, fixed=self.spec.fixed)
        except (gp.GpFitError, gp.NotPSDError) as exc:
            try:
                fresh = apply_static_mode(cfg)
                self.model = gp.fit(self.X, self.y, init=fresh.init,
                                    restarts=max(2, cfg.gp_restarts), rng=self.rng_gp,
                                    fixed=self.spec.fixed)
            except (gp.GpFitError, gp.NotPSDError) as exc2:
                raise MissionAbort(
                    f"GP fit failed at epoch {self.epoch} with n={self.y.size}: {exc}; retry: {exc2}"
                ) from exc2
        self.params = self.model.params
        self.weight = None

    def score_fn(self, clock):
        cfg = self.cfg
        acq = cfg.acquisition
        if isinstance(acq, AcquisitionKind) and acq.weighting == "LW" and self.weight is None:
            self.weight = refresh_weight(self.model, cfg.prior, clock, cfg.n_weight_samples,
                                         cfg.n_gmm, rng=self.rng_lw)
        ctx = AcquisitionContext(self.model, cfg.prior, self.weight, clock,
                                 y_star=float(self.y.min()))
        if isinstance(acq, AcquisitionKind):
            return lambda X: criterion(acq, ctx, X)
        return lambda X: np.asarray(acq(ctx, X), dtype=float)

    # bookkeeping ----------------------------------------------------------

    def snapshot(self, clock, pose, destination):
        rec = {
            "epoch": self.epoch,
            "clock": float(clock),
            "pose": [float(v) for v in pose.as_tuple()],
            "destination": None if destination is None else [float(v) for v in destination],
            "acquisition": self.cfg.acquisition_tag,
            "n_data": int(self.y.size),
            "hyperparameters": {
                "signal_variance": float(self.model.params.signal_variance),
                "lengthscales": [float(v) for v in self.model.params.lengthscales],
                "noise_variance": float(self.model.params.noise_variance),
            },
        }
        rec.update(self.record(self.model, clock))
        self.trace.append(rec)
        self.epoch += 1

    def choose(self, pose, clock, pointwise):
        cfg = self.cfg
        adm = admissible_destinations(pose, cfg.lookahead, cfg.half_angle, cfg.turning_radius,
                                      cfg.n_candidates)
        if self.epoch == 1:  # only the initial snapshot so far
            # a single measurement says nothing about where to go first
            idx = int(self.rng_plan.integers(len(adm.candidates)))
            return adm.candidates[idx], candidate_paths(pose, adm.candidates[idx:idx + 1],
                                                        cfg.turning_radius)[0]
        score = self.score_fn(clock)
        if pointwise:
            sel = select_pointwise(pose, clock, adm, score, cfg.turning_radius, dim=self.spec.dim)
        else:
            sel = select_destination(pose, clock, adm, score, cfg.turning_radius, cfg.speed,
                                     cfg.n_path_samples, dim=self.spec.dim)
        return sel.destination, sel.path


def run_mission(env, cfg: MissionConfig):
    """Informative path planning with en-route sampling on the global clock.

    Returns ``(trace, model)``; ``trace`` holds one record per epoch (the
    initial state, every arrival, and the end of a partial final leg).
    """
    m = _Mission(env, cfg)
    T, ts, v = cfg.duration, cfg.sample_period, cfg.speed
    pose = Pose(np.asarray(cfg.z0, float), cfg.theta0)
    clock = 0.0
    tick = 0
    m.measure(pose.z, 0.0)
    m.refit()
    m.snapshot(clock, pose, None)
    while clock < T - _TICK_TOL:
        dest, path = m.choose(pose, clock, pointwise=False)
        arrival = clock + path.length / v
        end = min(arrival, T)
        k_last = int(np.floor(end / ts + _TICK_TOL))
        ks = np.arange(tick + 1, k_last + 1)
        if ks.size:
            times = ks * ts
            pts = path.points_at((times - clock) * v)[:, :2]
            m.measure(pts, times)
            tick = int(ks[-1])
        if arrival > T:
            p = path.points_at((T - clock) * v)[0]
            pose, clock = Pose(np.clip(p[:2], 0, 1), p[2]), T
        else:
            pose, clock = path.end(), arrival
        m.refit()
        m.snapshot(clock, pose, dest)
    return m.trace, m.model


def run_next_best_view(env, cfg: MissionConfig):
    """Myopic loop: one measurement per destination, chosen pointwise."""
    m = _Mission(env, cfg)
    T, v = cfg.duration, cfg.speed
    pose = Pose(np.asarray(cfg.z0, float), cfg.theta0)
    clock = 0.0
    m.measure(pose.z, 0.0)
    m.refit()
    m.snapshot(clock, pose, None)
    while clock < T - _TICK_TOL:
        dest, path = m.choose(pose, clock, pointwise=True)
        arrival = clock + path.length / v
        if arrival > T:
            break
        pose, clock = path.end(), arrival
        m.measure(pose.z, clock)
        m.refit()
        m.snapshot(clock, pose, dest)
    return m.trace, m.model


# -- trace serialization -------------------------------------------------------


def dumps_trace(trace) -> str:
    return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in trace)


def loads_trace(text: str) -> list:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_trace(trace))


def read_trace(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return loads_trace(fh.read())


def with_seed(cfg: MissionConfig, seed: int) -> MissionConfig:
    return replace(cfg, seed=int(seed))


__all__ = ["MissionConfig", "MissionAbort", "ModelSpec", "apply_static_mode", "run_mission",
           "run_next_best_view", "dumps_trace", "loads_trace", "write_trace", "read_trace",
           "with_seed", "METRICS", "STATIC_MODES"]
