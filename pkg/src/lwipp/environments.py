"""Ground-truth fields on the unit square: analytic benchmarks and gridded terrain."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

PERIOD = 15.0
DEFAULT_DURATION = 15.0


class ConfigurationError(ValueError):
    pass


class GridParseError(ValueError):
    pass


# -- analytic benchmarks (native coordinates) ---------------------------------


def ackley(z1, z2, a=20.0, b=0.2, c=2 * np.pi):
    r = np.sqrt((z1**2 + z2**2) / 2)
    # grouped so the global minimum evaluates to exactly zero
    return (a - a * np.exp(-b * r)) + (np.e - np.exp((np.cos(c * z1) + np.cos(c * z2)) / 2))


def bird(z1, z2):
    return (np.sin(z1) * np.exp((1 - np.cos(z2)) ** 2)
            + np.cos(z2) * np.exp((1 - np.sin(z1)) ** 2) + (z1 - z2) ** 2)


def bukin06(z1, z2):
    return 100 * np.sqrt(np.abs(z2 - 0.01 * z1**2)) + 0.01 * np.abs(z1 + 10)


def michalewicz(z1, z2, m=10):
    return (-np.sin(z1) * np.sin(z1**2 / np.pi) ** (2 * m)
            - np.sin(z2) * np.sin(2 * z2**2 / np.pi) ** (2 * m))


def mod_rosenbrock(z1, z2):
    return (74 + 100 * (z2 - z1**2) ** 2 + (1 - z1) ** 2
            - 400 * np.exp(-10 * (z1 + 1) ** 2 - 10 * (z2 + 1) ** 2))


BENCHMARKS = {
    "ackley": (ackley, ((-5.0, 5.0), (-5.0, 5.0))),
    "bird": (bird, ((-2 * np.pi, 2 * np.pi), (-2 * np.pi, 2 * np.pi))),
    "bukin06": (bukin06, ((-15.0, -5.0), (-3.0, 3.0))),
    "michalewicz": (michalewicz, ((0.0, np.pi), (0.0, np.pi))),
    "mod_rosenbrock": (mod_rosenbrock, ((-2.0, 2.0), (-2.0, 2.0))),
}


@dataclass(frozen=True)
class Rescale:
    """Affine map between the unit square and a native rectangle."""

    lo: tuple
    hi: tuple

    def to_native(self, Z):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return lo + np.asarray(Z, dtype=float) * (hi - lo)

    def to_unit(self, W):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return (np.asarray(W, dtype=float) - lo) / (hi - lo)


@dataclass(frozen=True)
class Environment:
    """A field ``f(z, t)`` on the unit square.

    ``func`` takes unit-square positions ``(m, 2)`` and times ``(m,)``.
    """

    name: str
    func: Callable
    noise_variance: float = 0.0
    time_dependent: bool = False
    descriptor: dict = field(default_factory=dict)

    def eval(self, Z, t=0.0) -> np.ndarray:
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        t = np.broadcast_to(np.asarray(t, dtype=float), (Z.shape[0],))
        return self.func(Z, t)

    def __call__(self, Z, t=0.0):
        return self.eval(Z, t)

    def with_noise(self, noise_variance: float) -> "Environment":
        return replace(self, noise_variance=float(noise_variance))


def make_benchmark(name: str, noise_base: float | None = 1e-3, n_calibrate: int = 100_000,
                   seed: int = 0) -> Environment:
    """Analytic benchmark composed with the affine rescale to the unit square.

    The observation noise variance is ``noise_base`` times the sample
    variance of the field; ``noise_base=None`` leaves it at zero.
    """
    if name not in BENCHMARKS:
        raise ConfigurationError(
            f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}"
        )
    raw, domain = BENCHMARKS[name]
    rs = Rescale(tuple(d[0] for d in domain), tuple(d[1] for d in domain))

    def func(Z, t):
        W = rs.to_native(Z)
        return raw(W[:, 0], W[:, 1])

    env = Environment(name, func, 0.0, False,
                      {"name": name, "native_domain": [list(d) for d in domain],
                       "rescale": "affine unit square -> native"})
    if noise_base is not None:
        env = env.with_noise(calibrate_noise(env, noise_base, n_calibrate, rng=seed))
    return env


def dynamic_shift(t):
    """Offsets applied to ``(z1, z2)`` at time ``t``."""
    t = np.asarray(t, dtype=float)
    return 0.1 * np.sin(2 * np.pi * t / PERIOD), 0.4 * t / PERIOD


def make_dynamic(base: Environment) -> Environment:
    """Translate the base field periodically through the wrapped unit square."""

    def func(Z, t):
        s1, s2 = dynamic_shift(t)
        W = np.column_stack([np.mod(Z[:, 0] + s1, 1.0), np.mod(Z[:, 1] + s2, 1.0)])
        return base.func(W, t)

    # the wrapped translation preserves the uniform measure, hence the field
    # variance and the calibrated noise carry over unchanged
    desc = dict(base.descriptor, dynamic=True)
    return Environment(f"dynamic_{base.name}", func, base.noise_variance, True, desc)


def calibrate_noise(env: Environment, base_variance: float, n: int = 100_000, rng=None,
                    duration: float = DEFAULT_DURATION) -> float:
    """``base_variance`` times the sample variance of the field.

    Gridded (measured) environments are not corrupted and return 0.
    """
    if env.descriptor.get("kind") == "grid":
        return 0.0
    if n < 1000:
        raise ValueError("calibration needs at least 1000 samples")
    rng = np.random.default_rng(rng)
    Z = rng.uniform(size=(n, 2))
    t = rng.uniform(0.0, duration, size=n) if env.time_dependent else np.zeros(n)
    return float(base_variance * np.var(env.eval(Z, t)))


# -- gridded terrain ---------------------------------------------------------


@dataclass(frozen=True)
class GridField:
    """Tensor-product cubic spline through a regular lattice.

    ``lattice[i, j]`` is the value at ``(x[j], y[i])``.
    """

    lattice: np.ndarray
    x: np.ndarray
    y: np.ndarray
    spline: NdBSpline

    @classmethod
    def from_lattice(cls, lattice, x, y) -> "GridField":
        lattice = np.asarray(lattice, dtype=float)
        if lattice.shape[0] < 4 or lattice.shape[1] < 4:
            raise GridParseError("lattice must be at least 4x4")
        sx = make_interp_spline(x, lattice.T, k=3, axis=0)
        sy = make_interp_spline(y, sx.c.T, k=3, axis=0)
        spline = NdBSpline((sx.t, sy.t), sy.c.T, 3)
        return cls(lattice, np.asarray(x, float), np.asarray(y, float), spline)

    def __call__(self, px, py) -> np.ndarray:
        px = np.clip(px, self.x[0], self.x[-1])
        py = np.clip(py, self.y[0], self.y[-1])
        return self.spline(np.column_stack([px, py]))


def parse_grid(text: str, source: str = "<grid>"):
    """Parse an ESRI-ASCII-style grid.

    Header keys ``ncols``, ``nrows``, ``xllcorner``, ``yllcorner`` and
    ``cellsize`` are required; ``nodata_value`` is optional and may not
    appear in the data. The first data row is the northernmost.
    Returns ``(lattice, x, y)`` with ``lattice[0]`` the southernmost row.
    """
    lines = text.splitlines()
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        try:
            float(parts[0])
            break
        except ValueError:
            pass
        if len(parts) != 2:
            raise GridParseError(f"{source}:{i + 1}: malformed header line {lines[i]!r}")
        header[parts[0].lower()] = parts[1]
        i += 1
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if key not in header:
            raise GridParseError(f"{source}: missing header key {key!r}")
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        x0, y0 = float(header["xllcorner"]), float(header["yllcorner"])
        cell = float(header["cellsize"])
    except ValueError as exc:
        raise GridParseError(f"{source}: bad header value ({exc})") from None
    nodata = header.get("nodata_value")
    rows = []
    for k, line in enumerate(lines[i:], start=i + 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != ncols:
            raise GridParseError(
                f"{source}:{k}: row {len(rows) + 1} has {len(parts)} values, expected {ncols}"
            )
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            col = next(j for j, p in enumerate(parts) if not _is_float(p))
            raise GridParseError(
                f"{source}:{k}: row {len(rows) + 1}, column {col + 1}: "
                f"cannot parse {parts[col]!r}"
            ) from None
        if nodata is not None and float(nodata) in vals:
            col = vals.index(float(nodata))
            raise GridParseError(f"{source}:{k}: row {len(rows) + 1}, column {col + 1}: nodata")
        rows.append(vals)
    if len(rows) != nrows:
        raise GridParseError(f"{source}: found {len(rows)} rows, expected {nrows}")
    lattice = np.array(rows[::-1])
    x = x0 + cell * np.arange(ncols)
    y = y0 + cell * np.arange(nrows)
    return lattice, x, y


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def format_grid(lattice, x0=0.0, y0=0.0, cellsize=1.0) -> str:
    """Inverse of :func:`parse_grid`; ``lattice[0]`` is the southernmost row."""
    lattice = np.asarray(lattice, dtype=float)
    nrows, ncols = lattice.shape
    out = [f"ncols {ncols}", f"nrows {nrows}", f"xllcorner {x0!r}", f"yllcorner {y0!r}",
           f"cellsize {cellsize!r}"]
    out += [" ".join(f"{v:.10g}" for v in row) for row in lattice[::-1]]
    return "\n".join(out) + "\n"


def make_grid_env(path_or_text, name: str | None = None) -> Environment:
    """Environment from a lattice file, rescaled to the unit square."""
    p = Path(str(path_or_text))
    if "\n" not in str(path_or_text) and p.exists():
        text, source = p.read_text(), str(p)
    else:
        text, source = str(path_or_text), "<grid>"
    lattice, x, y = parse_grid(text, source)
    gf = GridField.from_lattice(lattice, x, y)
    rs = Rescale((x[0], y[0]), (x[-1], y[-1]))

    def func(Z, t):
        W = rs.to_native(Z)
        return gf(W[:, 0], W[:, 1])

    desc = {"name": name or p.stem, "kind": "grid", "shape": list(lattice.shape),
            "native_domain": [[float(x[0]), float(x[-1])], [float(y[0]), float(y[-1])]]}
    env = Environment(name or p.stem, func, 0.0, False, desc)
    object.__setattr__(env, "grid", gf)
    return env


TRENCH_MIN = (0.62, 0.42)


def trench_lattice(n: int = 61):
    """Synthetic bathymetry: a gently tilted plain cut by a deep, curved trench."""
    u = np.linspace(0.0, 1.0, n)
    U1, U2 = np.meshgrid(u, u)  # rows follow z2
    plain = -4200.0 - 400.0 * U1 + 150.0 * U2
    # trench axis runs roughly south-south-west to north-north-east
    cx, cy = TRENCH_MIN
    ang = np.deg2rad(70.0)
    dx, dy = U1 - cx, U2 - cy
    along = dx * np.cos(ang) + dy * np.sin(ang)
    across = -dx * np.sin(ang) + dy * np.cos(ang) - 0.15 * along**2
    depth = 5500.0 * np.exp(-0.5 * (across / 0.045) ** 2) * np.exp(-0.5 * (along / 0.3) ** 2)
    return plain - depth


def trench_path() -> Path:
    return Path(str(resources.files("lwipp") / "data" / "trench.asc"))


def make_trench_env() -> Environment:
    return make_grid_env(trench_path(), name="trench")


def make_environment(name: str, noise_base: float = 1e-3) -> Environment:
    """Resolve names such as ``michalewicz``, ``dynamic_ackley``, ``trench`` or a grid path."""
    if name == "trench":
        return make_trench_env()
    if name.startswith("dynamic_"):
        return make_dynamic(make_benchmark(name[len("dynamic_"):], noise_base))
    if name in BENCHMARKS:
        return make_benchmark(name, noise_base)
    p = Path(name)
    if p.suffix == ".asc" and p.exists():
        return make_grid_env(p)
    raise ConfigurationError(f"unknown environment {name!r}")
