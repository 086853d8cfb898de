"""Command-line front end: ``run``, ``bench`` and ``validate``.

Experiment specs are YAML files::

    name: michalewicz-gaussian
    environment: michalewicz          # or {name: ..., noise_base: 1e-3}
    algorithm: ipp                    # ipp (en-route sampling) or nbv
    acquisitions: [IVR-IW, IVR-LW]    # entries may also be {tag: UCB, kappa: 2}
    prior: {kind: gaussian, mean: [0.5, 0.5], covariance: 0.01}
    replicates: 10
    seed: 0
    output: runs/michalewicz-gaussian
    mission: {duration: 15, n_probes: 100000}

``prior.covariance`` may be a scalar (times the identity) or a 2x2 matrix.
Relative output paths are resolved under ``$LWIPP_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .acquisition import AcquisitionKind, ConfigurationError as AcqConfigError
from .density import InputPrior
from .environments import ConfigurationError as EnvConfigError, make_environment
from .metrics import aggregate
from .mission import MissionAbort, MissionConfig, dumps_trace, run_mission, run_next_best_view
from .planner import PlannerStuck

OUTPUT_ROOT_ENV = "LWIPP_OUTPUT_ROOT"
SPEC_KEYS = {"name", "environment", "algorithm", "acquisitions", "prior", "replicates", "seed",
             "output", "mission"}
# fields owned by the spec itself rather than the mission section
_RESERVED = {"acquisition", "prior", "seed"}
MISSION_KEYS = {f.name for f in fields(MissionConfig)} - _RESERVED
ALGORITHMS = {"ipp": run_mission, "nbv": run_next_best_view}

GAUSSIAN_CENTER = {"kind": "gaussian", "mean": [0.5, 0.5], "covariance": 0.01}
ADVERSARIAL = {"kind": "gaussian", "mean": [0.25, 0.75], "covariance": 0.01}
STATIC = ["ackley", "bird", "bukin06", "michalewicz", "mod_rosenbrock"]
UNWEIGHTED = ["US", "US-LW", "IVR", "IVR-LW"]
WEIGHTED = ["US-IW", "US-LW", "IVR-IW", "IVR-LW"]
SUITES = {
    "static-uniform": [(e, UNWEIGHTED, {"kind": "uniform"}) for e in STATIC],
    "static-gaussian": [(e, WEIGHTED, GAUSSIAN_CENTER) for e in STATIC],
    "dynamic-adversarial": [(e, WEIGHTED, ADVERSARIAL)
                            for e in ("dynamic_ackley", "dynamic_michalewicz")],
    "grid": [("trench", UNWEIGHTED, {"kind": "uniform"}),
             ("trench", WEIGHTED, GAUSSIAN_CENTER)],
}


class SpecError(ValueError):
    """Field-level problems with an experiment spec."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# -- spec parsing --------------------------------------------------------------


def _prior(d, errors):
    if not isinstance(d, dict) or d.get("kind") not in ("uniform", "gaussian"):
        errors.append("prior.kind: must be 'uniform' or 'gaussian'")
        return None
    if d["kind"] == "uniform":
        extra = set(d) - {"kind"}
        if extra:
            errors.append(f"prior: unexpected keys {sorted(extra)} for a uniform prior")
        return InputPrior.uniform()
    try:
        mean = np.asarray(d.get("mean"), dtype=float)
        cov = np.asarray(d.get("covariance"), dtype=float)
    except (TypeError, ValueError):
        errors.append("prior: mean and covariance must be numeric")
        return None
    if mean.shape != (2,):
        errors.append("prior.mean: must be a 2-vector")
        return None
    if cov.ndim == 0:
        cov = float(cov) * np.eye(2)
    if cov.shape != (2, 2) or not np.allclose(cov, cov.T) or np.linalg.eigvalsh(cov).min() <= 0:
        errors.append("prior.covariance: must be a positive scalar or a symmetric "
                      "positive-definite 2x2 matrix")
        return None
    return InputPrior.gaussian(mean, cov)


def _acquisitions(items, errors):
    if not isinstance(items, list) or not items:
        errors.append("acquisitions: must be a nonempty list")
        return []
    out = []
    for i, a in enumerate(items):
        try:
            if isinstance(a, str):
                out.append(AcquisitionKind(a))
            elif isinstance(a, dict) and set(a) <= {"tag", "kappa"}:
                k = a.get("kappa")
                out.append(AcquisitionKind(a.get("tag"), None if k is None else float(k)))
            else:
                errors.append(f"acquisitions[{i}]: expected a tag or {{tag, kappa}}")
        except (AcqConfigError, TypeError, ValueError) as exc:
            errors.append(f"acquisitions[{i}]: {exc}")
    labels = [_label(a) for a in out]
    if len(set(labels)) != len(labels):
        errors.append("acquisitions: duplicate entries")
    return out


def _label(kind: AcquisitionKind) -> str:
    return kind.tag if kind.kappa is None else f"{kind.tag}-k{kind.kappa:g}"


_DEFAULTS = MissionConfig()


def _coerce(key, value):
    default = getattr(_DEFAULTS, key)
    if key == "z0":
        z = tuple(float(v) for v in value)
        if len(z) != 2:
            raise ValueError(key)
        return z
    if isinstance(default, bool) or isinstance(default, str):
        return type(default)(value)
    if isinstance(default, int):
        # YAML reads 1e5 as a string; accept any integral number
        f = float(value)
        if f != int(f):
            raise ValueError(key)
        return int(f)
    return float(value)


def parse_spec(d) -> dict:
    """Validate a spec mapping; returns a normalized copy or raises :class:`SpecError`."""
    errors = []
    if not isinstance(d, dict):
        raise SpecError(["spec: top level must be a mapping"])
    unknown = set(d) - SPEC_KEYS
    if unknown:
        errors.append(f"spec: unknown keys {sorted(unknown)}")
    for key in ("environment", "acquisitions"):
        if key not in d:
            errors.append(f"{key}: required")
    env = d.get("environment")
    if isinstance(env, str):
        env = {"name": env}
    if env is not None and not (isinstance(env, dict) and isinstance(env.get("name"), str)
                                and set(env) <= {"name", "noise_base"}):
        errors.append("environment: expected a name or {name, noise_base}")
    algorithm = d.get("algorithm", "ipp")
    if algorithm not in ALGORITHMS:
        errors.append(f"algorithm: must be one of {sorted(ALGORITHMS)}")
    replicates = d.get("replicates", 1)
    if not isinstance(replicates, int) or isinstance(replicates, bool) or replicates < 1:
        errors.append("replicates: must be an integer >= 1")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append("seed: must be a nonnegative integer")
    acqs = _acquisitions(d.get("acquisitions"), errors) if "acquisitions" in d else []
    prior = _prior(d.get("prior", {"kind": "uniform"}), errors)
    mission = d.get("mission", {}) or {}
    if not isinstance(mission, dict):
        errors.append("mission: must be a mapping")
        mission = {}
    bad = set(mission) - MISSION_KEYS
    if bad:
        errors.append(f"mission: unknown keys {sorted(bad)}")
    cfg = None
    kw = {}
    for key, value in mission.items():
        if key in MISSION_KEYS:
            try:
                kw[key] = _coerce(key, value)
            except (TypeError, ValueError):
                errors.append(f"mission.{key}: cannot use {value!r}")
    if not errors:
        try:
            cfg = MissionConfig(prior=prior, **kw)
        except (TypeError, ValueError) as exc:
            errors.append(f"mission: {exc}")
    if errors:
        raise SpecError(errors)
    name = str(d.get("name", env["name"]))
    return {"name": name, "environment": env, "algorithm": algorithm,
            "acquisitions": acqs, "prior": prior, "replicates": replicates, "seed": seed,
            "output": d.get("output", f"runs/{name}"), "config": cfg, "raw": d}


def apply_overrides(d: dict, pairs) -> dict:
    """Set dotted ``key=value`` pairs (values parsed as YAML scalars)."""
    d = copy.deepcopy(d)
    for pair in pairs or ():
        if "=" not in pair:
            raise SpecError([f"--set {pair!r}: expected key=value"])
        key, value = pair.split("=", 1)
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise SpecError([f"--set {key}: {p} is not a section"])
        node[parts[-1]] = yaml.safe_load(value)
    return d


def resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# -- execution -------------------------------------------------------------------


@lru_cache(maxsize=None)
def _environment(name: str, noise_base: float):
    return make_environment(name, noise_base)


def _run_one(task):
    env_name, noise_base, algorithm, cfg = task
    env = _environment(env_name, noise_base)
    try:
        trace, _ = ALGORITHMS[algorithm](env, cfg)
    except (MissionAbort, PlannerStuck) as exc:
        return None, f"{type(exc).__name__}: {exc}"
    return dumps_trace(trace), None


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _spec_echo(spec) -> dict:
    return {"name": spec["name"], "environment": spec["environment"],
            "algorithm": spec["algorithm"], "acquisitions": [_label(a) for a in spec["acquisitions"]],
            "prior": spec["prior"].to_dict(), "replicates": spec["replicates"],
            "seed": spec["seed"], "mission": _mission_echo(spec["config"])}


def _mission_echo(cfg) -> dict:
    d = cfg.to_dict()
    for key in _RESERVED | {"kappa"}:
        d.pop(key, None)
    return _jsonable(d)


def _jsonable(d):
    return json.loads(json.dumps(d, default=float))


def run_experiments(specs, out: Path, jobs: int | None = None, log=print) -> int:
    """Run every replicate of every spec; writes traces, aggregates and a manifest."""
    out.mkdir(parents=True, exist_ok=True)
    tasks, paths = [], []
    for spec in specs:
        env = spec["environment"]
        noise = float(env.get("noise_base", 1e-3))
        for kind in spec["acquisitions"]:
            for r in range(spec["replicates"]):
                cfg = replace(spec["config"], acquisition=kind, seed=spec["seed"] + r)
                tasks.append((env["name"], noise, spec["algorithm"], cfg))
                paths.append((spec, kind, r,
                              out / spec["name"] / "traces" / f"{_label(kind)}_r{r:03d}.jsonl"))
    jobs = max(1, jobs or os.cpu_count() or 1)
    if jobs == 1 or len(tasks) == 1:
        results = map(_run_one, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=min(jobs, len(tasks)))
        results = pool.map(_run_one, tasks)
    failures = []
    written = {}
    try:
        for (spec, kind, r, path), (text, err) in zip(paths, results):
            if err is not None:
                failures.append(f"{spec['name']} {_label(kind)} replicate {r}: {err}")
                continue
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text, encoding="utf-8")
            written.setdefault((spec["name"], _label(kind)), []).append(text)
            log(f"wrote {path}")
    finally:
        if pool is not None:
            pool.shutdown()
    for spec in specs:
        for kind in spec["acquisitions"]:
            texts = written.get((spec["name"], _label(kind)), [])
            if len(texts) < 2:
                continue
            traces = [[json.loads(line) for line in t.splitlines()] for t in texts]
            csv_path = out / spec["name"] / f"aggregate_{_label(kind)}.csv"
            csv_path.write_text(aggregate(traces).to_csv(), encoding="utf-8")
            log(f"wrote {csv_path}")
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "package": "lwipp", "version": __version__,
        "status": "aborted" if failures else "ok",
        "failures": failures,
        "experiments": [_spec_echo(s) for s in specs],
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    if failures:
        for f in failures:
            print(f"mission aborted: {f}", file=sys.stderr)
        return 1
    return 0


def bench_specs(suite: str, replicates: int, overrides=()) -> list:
    if suite not in SUITES:
        raise SpecError([f"suite: unknown {suite!r}; choose from {sorted(SUITES)}"])
    specs = []
    for env, acqs, prior in SUITES[suite]:
        kind = "uniform" if prior["kind"] == "uniform" else "gaussian"
        raw = {"name": f"{env}-{kind}", "environment": env, "acquisitions": list(acqs),
               "prior": dict(prior), "replicates": replicates, "seed": 0,
               "mission": {"n_gmm": 2}}
        specs.append(parse_spec(apply_overrides(raw, overrides)))
    return specs


# -- commands --------------------------------------------------------------------


def cmd_run(args) -> int:
    try:
        with open(args.spec, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
        spec = parse_spec(apply_overrides(raw, args.set))
    except OSError as exc:
        print(f"error: cannot read spec: {exc}", file=sys.stderr)
        return 2
    except yaml.YAMLError as exc:
        print(f"error: spec is not valid YAML: {exc}", file=sys.stderr)
        return 2
    except SpecError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    try:
        _environment(spec["environment"]["name"],
                     float(spec["environment"].get("noise_base", 1e-3)))
    except EnvConfigError as exc:
        print(f"error: environment: {exc}", file=sys.stderr)
        return 2
    out = resolve_output(args.output or spec["output"])
    return run_experiments([spec], out, args.jobs)


def cmd_bench(args) -> int:
    try:
        specs = bench_specs(args.suite, args.replicates, args.set)
    except SpecError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return 2
    out = resolve_output(args.output or f"runs/bench-{args.suite}")
    return run_experiments(specs, out, args.jobs)


def cmd_validate(args) -> int:
    from .validation import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lwipp", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"lwipp {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--jobs", type=int, default=None,
                       help="parallel missions (default: available cores)")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a spec field, e.g. mission.n_probes=20000")

    p = sub.add_parser("run", help="run an experiment spec")
    p.add_argument("spec")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="run a predefined experiment suite")
    p.add_argument("suite", help=f"one of {', '.join(SUITES)}")
    p.add_argument("--replicates", type=int, default=10)
    common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("validate", help="run the oracle checks")
    p.add_argument("--quick", action="store_true", help="fewer Dubins pairs")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
