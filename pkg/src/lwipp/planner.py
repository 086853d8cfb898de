"""Dubins paths, admissible destinations and path-integral destination choice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi
FAMILIES = ("LSL", "RSR", "LSR", "RSL", "RLR", "LRL")


class PlannerStuck(RuntimeError):
    """No admissible destination remains, even after widening the arc."""


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.mod(np.asarray(a, dtype=float) + np.pi, TWO_PI) - np.pi
    a = np.where(a == -np.pi, np.pi, a)
    return a if a.ndim else float(a)


def _mod2pi(a):
    return np.mod(a, TWO_PI)


@dataclass(frozen=True)
class Pose:
    z: np.ndarray
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "z", np.asarray(self.z, dtype=float).reshape(2))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_tuple(self):
        return float(self.z[0]), float(self.z[1]), float(self.theta)


# -- Dubins geometry ---------------------------------------------------------


def _words(alpha, beta, d):
    """Normalized segment lengths ``(t, p, q)`` of the six families, or None."""
    sa, sb, ca, cb = np.sin(alpha), np.sin(beta), np.cos(alpha), np.cos(beta)
    cab = np.cos(alpha - beta)
    out = {}

    p2 = 2 + d * d - 2 * cab + 2 * d * (sa - sb)
    if p2 >= 0:
        tmp = np.arctan2(cb - ca, d + sa - sb)
        out["LSL"] = (_mod2pi(-alpha + tmp), np.sqrt(p2), _mod2pi(beta - tmp))

    p2 = 2 + d * d - 2 * cab + 2 * d * (sb - sa)
    if p2 >= 0:
        tmp = np.arctan2(ca - cb, d - sa + sb)
        out["RSR"] = (_mod2pi(alpha - tmp), np.sqrt(p2), _mod2pi(-beta + tmp))

    p2 = -2 + d * d + 2 * cab + 2 * d * (sa + sb)
    if p2 >= 0:
        p = np.sqrt(p2)
        tmp = np.arctan2(-ca - cb, d + sa + sb) - np.arctan2(-2.0, p)
        out["LSR"] = (_mod2pi(-alpha + tmp), p, _mod2pi(-_mod2pi(beta) + tmp))

    p2 = -2 + d * d + 2 * cab - 2 * d * (sa + sb)
    if p2 >= 0:
        p = np.sqrt(p2)
        tmp = np.arctan2(ca + cb, d - sa - sb) - np.arctan2(2.0, p)
        out["RSL"] = (_mod2pi(alpha - tmp), p, _mod2pi(beta - tmp))

    tmp = (6 - d * d + 2 * cab + 2 * d * (sa - sb)) / 8
    if abs(tmp) <= 1:
        p = _mod2pi(TWO_PI - np.arccos(tmp))
        t = _mod2pi(alpha - np.arctan2(ca - cb, d - sa + sb) + p / 2)
        out["RLR"] = (t, p, _mod2pi(alpha - beta - t + p))

    tmp = (6 - d * d + 2 * cab + 2 * d * (sb - sa)) / 8
    if abs(tmp) <= 1:
        p = _mod2pi(TWO_PI - np.arccos(tmp))
        t = _mod2pi(-alpha - np.arctan2(ca - cb, d + sa - sb) + p / 2)
        out["LRL"] = (t, p, _mod2pi(_mod2pi(beta) - alpha - t + p))
    return out


def _advance(x, y, th, kind, s, rho):
    """Pose after travelling arclength ``s`` (array) on one segment."""
    if kind == "S":
        return x + s * np.cos(th), y + s * np.sin(th), th + 0 * s
    if kind == "L":
        th2 = th + s / rho
        return x + rho * (np.sin(th2) - np.sin(th)), y - rho * (np.cos(th2) - np.cos(th)), th2
    th2 = th - s / rho
    return x - rho * (np.sin(th2) - np.sin(th)), y + rho * (np.cos(th2) - np.cos(th)), th2


@dataclass(frozen=True)
class DubinsPath:
    start: Pose
    word: str
    lengths: tuple
    radius: float

    @property
    def length(self) -> float:
        return float(sum(self.lengths))

    def segments(self):
        return list(zip(self.word, self.lengths))

    def points_at(self, s) -> np.ndarray:
        """Poses ``(x, y, theta)`` at arclengths ``s`` (clipped to the path)."""
        s = np.clip(np.atleast_1d(np.asarray(s, dtype=float)), 0.0, self.length)
        out = np.empty((s.size, 3))
        x, y, th = self.start.as_tuple()
        offset = 0.0
        done = np.zeros(s.size, dtype=bool)
        for k, (kind, seg) in enumerate(self.segments()):
            last = k == len(self.lengths) - 1
            sel = ~done & ((s <= offset + seg) | last)
            if np.any(sel):
                px, py, pt = _advance(x, y, th, kind, s[sel] - offset, self.radius)
                out[sel] = np.column_stack([px, py, pt])
                done |= sel
            x, y, th = _advance(x, y, th, kind, seg, self.radius)
            offset += seg
        out[:, 2] = wrap_angle(out[:, 2])
        return out

    def end(self) -> Pose:
        p = self.points_at(self.length)[0]
        return Pose(p[:2], p[2])


def dubins_candidates(start: Pose, end: Pose, radius: float) -> dict:
    """Total length of every feasible family, keyed by word."""
    return {w: sum(l) for w, l in _family_lengths(start, end, radius).items()}


def _family_lengths(start, end, radius):
    if radius <= 0:
        raise ValueError("turning radius must be positive")
    dx, dy = end.z - start.z
    d = np.hypot(dx, dy) / radius
    phi = np.arctan2(dy, dx) if d > 0 else 0.0
    alpha = _mod2pi(start.theta - phi)
    beta = _mod2pi(end.theta - phi)
    return {w: tuple(radius * v for v in tpq) for w, tpq in _words(alpha, beta, d).items()}


def shortest_dubins(start: Pose, end: Pose, radius: float) -> DubinsPath:
    fams = _family_lengths(start, end, radius)
    if not fams:
        return DubinsPath(start, "SSS", (0.0, 0.0, 0.0), radius)
    word = min(FAMILIES, key=lambda w: sum(fams[w]) if w in fams else np.inf)
    return DubinsPath(start, word, fams[word], radius)


def sample_path(path: DubinsPath, ds: float):
    """Points at arclengths ``0, ds, 2 ds, ...`` and the path end.

    Returns ``(points, arclengths)`` with ``points`` of shape ``(m, 2)``.
    """
    if ds <= 0:
        raise ValueError("ds must be positive")
    total = path.length
    s = np.arange(0.0, total, ds)
    if s.size == 0 or total - s[-1] > 1e-12 * max(1.0, total):
        s = np.append(s, total)
    return path.points_at(s)[:, :2], s


# -- admissible destinations -------------------------------------------------


@dataclass(frozen=True)
class AdmissibleSet:
    center: Pose
    lookahead: float
    half_angle: float
    margin: float
    bearings: np.ndarray
    candidates: np.ndarray


def _arc(pose, L, alpha, n):
    if alpha >= np.pi:
        b = pose.theta + np.linspace(-np.pi, np.pi, n, endpoint=False)
    else:
        b = pose.theta + np.linspace(-alpha, alpha, n)
    pts = pose.z + L * np.column_stack([np.cos(b), np.sin(b)])
    return b, pts


def admissible_destinations(pose: Pose, L: float, alpha: float, R: float,
                            n_candidates: int = 64) -> AdmissibleSet:
    """Destinations on the lookahead arc at least ``2R`` inside the unit square."""
    if L <= 0 or not 0 < alpha <= np.pi or n_candidates < 2:
        raise ValueError("invalid arc parameters")
    margin = 2 * R
    a = alpha
    for _ in range(2):
        b, pts = _arc(pose, L, a, n_candidates)
        keep = np.all((pts > margin) & (pts < 1 - margin), axis=1)
        if np.any(keep):
            return AdmissibleSet(pose, L, a, margin, wrap_angle(b[keep]), pts[keep])
        a = min(2 * a, np.pi)
    raise PlannerStuck(
        f"no admissible destination from z={pose.z.tolist()} theta={pose.theta:.3f}"
    )


# -- destination selection ---------------------------------------------------


@dataclass(frozen=True)
class Selection:
    index: int
    destination: np.ndarray
    path: DubinsPath
    scores: np.ndarray


def candidate_paths(pose: Pose, candidates, radius: float):
    paths = []
    for c in candidates:
        heading = np.arctan2(c[1] - pose.z[1], c[0] - pose.z[0])
        paths.append(shortest_dubins(pose, Pose(c, heading), radius))
    return paths


def select_destination(pose: Pose, clock: float, admissible: AdmissibleSet, score_fn,
                       radius: float, speed: float = 1.0, n_path_samples: int = 16,
                       dim: int = 3) -> Selection:
    """Pick the candidate minimizing the trapezoid integral of ``score_fn`` along its path.

    ``score_fn`` maps an ``(m, dim)`` array of inputs (position and, for
    ``dim == 3``, time) to ``m`` values. Time advances with arclength.
    Ties resolve to the lowest candidate index.
    """
    paths = candidate_paths(pose, admissible.candidates, radius)
    inputs, arcs = [], []
    for p in paths:
        s = np.linspace(0.0, p.length, n_path_samples)
        xy = p.points_at(s)[:, :2]
        cols = [xy] if dim == 2 else [xy, (clock + s / speed)[:, None]]
        inputs.append(np.hstack(cols))
        arcs.append(s)
    values = np.asarray(score_fn(np.vstack(inputs))).reshape(len(paths), n_path_samples)
    scores = np.array([np.trapezoid(v, s) for v, s in zip(values, arcs)])
    idx = int(np.argmin(scores))
    return Selection(idx, admissible.candidates[idx], paths[idx], scores)


def select_pointwise(pose: Pose, clock: float, admissible: AdmissibleSet, score_fn,
                     radius: float, dim: int = 3) -> Selection:
    """Next-best-view choice: minimize ``score_fn`` at the candidates themselves."""
    c = admissible.candidates
    X = c if dim == 2 else np.column_stack([c, np.full(len(c), clock)])
    scores = np.asarray(score_fn(X)).ravel()
    idx = int(np.argmin(scores))
    path = candidate_paths(pose, c[idx:idx + 1], radius)[0]
    return Selection(idx, c[idx], path, scores)
