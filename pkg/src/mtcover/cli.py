"""Batch command line front end.

Subcommands:
    constants   measure the metric and conorm constants, emit JSON
    verify      run the full expansion pipeline, exit 0 iff it passes
    degree      enumerate preimages of a seeded probe point, report counts
    orbit       iterate the composite map from a start point, emit CSV
    seams       max chart discrepancy across every seam, per map

Exit codes: 0 success/pass, 1 verification failed, 2 config error,
3 numerical failure.

The JSON report is deterministic for a fixed config and seed: keys are
sorted, floats use repr round-tripping, and the timings block holds work
counters rather than wall-clock times (those go to stderr), so reruns and
thread-count changes are byte-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from dataclasses import dataclass

import numpy as np

from .coverings import build_f, build_qm_only, build_stage_inventory, orbit, \
    pi1_linear_part, preimages
from .errors import ConfigError, MTCoverError
from .expansion import (
    default_psi,
    estimate_C,
    estimate_cq,
    estimate_K,
    estimate_metric_equiv,
    run_pipeline,
    select_k,
)
from .fields import TrigDisplacementField, unit_grid
from .lifting import tower_from_field
from .manifolds import MetricG, MTPoint, check_seams
from .torus_maps import TrigDisplacementMap

_CONFIG_DEFAULTS = {
    "eps": 1.0,
    "m": 1,
    "k": None,
    "base": 3,
    "fiber_res": 64,
    "t_res": 32,
    "directions": 16,
    "newton_tol": 1e-12,
    "seam_tol": 1e-9,
    "fd_rel_tol": 1e-5,
    "nu_target": 2.0,
    "k_cap": 12,
    "seed": 0,
    "csv_out": None,
}
_REQUIRED_KEYS = ("n", "field")
_CONFIG_KEYS = _REQUIRED_KEYS + tuple(_CONFIG_DEFAULTS)


@dataclass
class RunConfig:
    """Validated run parameters; threads is runtime-only (flag, not config)."""

    n: int
    field: list
    eps: float = 1.0
    m: int = 1
    k: int | None = None
    base: int = 3
    fiber_res: int = 64
    t_res: int = 32
    directions: int = 16
    newton_tol: float = 1e-12
    seam_tol: float = 1e-9
    fd_rel_tol: float = 1e-5
    nu_target: float = 2.0
    k_cap: int = 12
    seed: int = 0
    csv_out: str | None = None
    threads: int = 1

    def echo(self) -> dict:
        return {key: getattr(self, key) for key in _CONFIG_KEYS}

    def displacement_field(self) -> TrigDisplacementField:
        terms = [(term["coeff"], term["freq"], term["phase"])
                 for term in self.field]
        return TrigDisplacementField.from_terms(self.n, terms).scaled(self.eps)


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def load_config(path: str, threads: int | None = None,
                seed: int | None = None) -> RunConfig:
    """Read and validate a JSON config; unknown or missing keys fail fast."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    for key in data:
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key: {key!r}")
    for key in _REQUIRED_KEYS:
        if key not in data:
            raise ConfigError(f"missing config key: {key!r}")
    merged = dict(_CONFIG_DEFAULTS)
    merged.update(data)
    cfg = RunConfig(**merged)
    if seed is not None:
        cfg.seed = seed
    if threads is not None:
        cfg.threads = threads
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    _require(isinstance(cfg.n, int) and cfg.n >= 1, f"'n' must be an integer >= 1, got {cfg.n!r}")
    _require(isinstance(cfg.m, int) and cfg.m >= 1, f"'m' must be an integer >= 1, got {cfg.m!r}")
    _require(cfg.k is None or (isinstance(cfg.k, int) and cfg.k >= 1),
             f"'k' must be null or an integer >= 1, got {cfg.k!r}")
    _require(isinstance(cfg.base, int) and cfg.base >= 2,
             f"'base' must be an integer >= 2, got {cfg.base!r}")
    for key in ("fiber_res", "t_res", "directions"):
        val = getattr(cfg, key)
        _require(isinstance(val, int) and val >= 4,
                 f"{key!r} must be an integer >= 4, got {val!r}")
    for key in ("newton_tol", "seam_tol", "fd_rel_tol", "nu_target"):
        val = getattr(cfg, key)
        _require(isinstance(val, (int, float)) and val > 0,
                 f"{key!r} must be positive, got {val!r}")
    _require(isinstance(cfg.k_cap, int) and cfg.k_cap >= 1,
             f"'k_cap' must be an integer >= 1, got {cfg.k_cap!r}")
    _require(isinstance(cfg.seed, int), f"'seed' must be an integer, got {cfg.seed!r}")
    _require(isinstance(cfg.eps, (int, float)) and np.isfinite(cfg.eps),
             f"'eps' must be a finite number, got {cfg.eps!r}")
    _require(cfg.threads >= 1, f"thread count must be >= 1, got {cfg.threads!r}")
    _require(isinstance(cfg.field, list), "'field' must be a list of term objects")
    for i, term in enumerate(cfg.field):
        _require(isinstance(term, dict), f"'field' term {i} must be an object")
        extra = set(term) - {"coeff", "freq", "phase"}
        _require(not extra, f"'field' term {i} has unknown keys: {sorted(extra)}")
        for part in ("coeff", "freq", "phase"):
            _require(part in term, f"'field' term {i} is missing {part!r}")
        _require(isinstance(term["coeff"], list) and len(term["coeff"]) == cfg.n,
                 f"'field' term {i}: 'coeff' must be a list of n={cfg.n} numbers")
        _require(isinstance(term["freq"], list) and len(term["freq"]) == cfg.n
                 and all(isinstance(v, int) for v in term["freq"]),
                 f"'field' term {i}: 'freq' must be a list of n={cfg.n} integers")
        _require(term["phase"] in ("sin", "cos"),
                 f"'field' term {i}: 'phase' must be \"sin\" or \"cos\"")


# ---------------------------------------------------------------------------
# Report plumbing


def _sanitize(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _sanitize(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def emit_json(doc: dict, out_path: str | None):
    text = json.dumps(_sanitize(doc), indent=2, sort_keys=True) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _work_counters(cfg: RunConfig) -> dict:
    # deterministic work-size counters; wall time goes to stderr only
    return {
        "parameter_slices": cfg.t_res,
        "grid_points_per_slice": cfg.fiber_res ** cfg.n,
        "direction_templates": 2 * cfg.directions + 1,
    }


def _csv_rows(rows, header: str, out_path: str | None):
    lines = [header]
    lines += [",".join("%.17g" % v for v in row) for row in rows]
    text = "\n".join(lines) + "\n"
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dump_conorm_csv(cfg: RunConfig, f, metric: MetricG):
    """Grid dump of the local vertical conorm of the composite map."""
    from .expansion import generalized_conorm_sq

    grid = unit_grid(cfg.n, cfg.fiber_res)
    rows = []
    for t in np.arange(cfg.t_res, dtype=float) / cfg.t_res:
        fr = f.frame(float(t), grid, +1)
        m_src = metric.fiber_gram(float(t), grid)
        m_dst = metric.fiber_gram(fr.t_out, fr.x_out)
        pulled = np.swapaxes(fr.v, -1, -2) @ m_dst @ fr.v
        local = np.sqrt(np.maximum(generalized_conorm_sq(pulled, m_src), 0.0))
        for x, c in zip(grid, local):
            rows.append([t, *x, c])
    header = "t," + ",".join(f"x_{i + 1}" for i in range(cfg.n)) + ",local_conorm"
    _csv_rows(rows, header, cfg.csv_out)


def _prepare(cfg: RunConfig):
    field = cfg.displacement_field()
    h = TrigDisplacementMap(field)
    return field, h, MetricG(h), default_psi(field)


def _choose_k(cfg: RunConfig, field, c_eq: float, lam: float, towers: dict):
    def tower_at(kk: int):
        if kk not in towers:
            towers[kk] = tower_from_field(field, kk, cfg.base)
        return towers[kk]

    if cfg.k is not None:
        return cfg.k, tower_at(cfg.k)

    def c_provider(kk: int) -> float:
        return estimate_C(tower_at(kk), cfg.fiber_res, cfg.t_res, cfg.threads)[0]

    k = select_k(c_eq, c_provider, lam, base=cfg.base, k_cap=cfg.k_cap)
    return k, tower_at(k)


# ---------------------------------------------------------------------------
# Commands


def cmd_constants(cfg: RunConfig, out_path: str | None = None) -> int:
    field, h, metric, psi = _prepare(cfg)
    c_eq = estimate_metric_equiv(metric, cfg.fiber_res, cfg.t_res, cfg.threads)
    qm = build_qm_only(h, cfg.m, psi)
    c_q = estimate_cq(qm, metric, cfg.fiber_res, cfg.t_res, cfg.threads)
    lam = cfg.nu_target / c_q
    towers: dict = {}
    k, tower = _choose_k(cfg, field, c_eq, lam, towers)
    c_val, c_bound = estimate_C(tower, cfg.fiber_res, cfg.t_res, cfg.threads)
    f = build_f(tower, cfg.m, psi)
    k_raw, k_eff = estimate_K(f, metric, cfg.fiber_res, cfg.t_res, cfg.threads)
    constants = {
        "c_eq": c_eq, "c_q": c_q, "conorm_C": c_val, "conorm_C_bound": c_bound,
        "coupling_K": k_raw, "coupling_K_eff": k_eff, "lambda_target": lam,
        "k": k, "base": cfg.base, "fiber_res": cfg.fiber_res, "t_res": cfg.t_res,
    }
    doc = {
        "config_echo": cfg.echo(),
        "constants": constants,
        "expansion": None,
        "timings": _work_counters(cfg),
        "pass": True,
    }
    emit_json(doc, out_path)
    if cfg.csv_out:
        _dump_conorm_csv(cfg, f, metric)
    return 0


def cmd_verify(cfg: RunConfig, out_path: str | None = None) -> int:
    field, h, metric, psi = _prepare(cfg)
    constants, report = run_pipeline(
        field, cfg.m, k=cfg.k, base=cfg.base, fiber_res=cfg.fiber_res,
        t_res=cfg.t_res, n_dirs=cfg.directions, nu_target=cfg.nu_target,
        k_cap=cfg.k_cap, seed=cfg.seed, threads=cfg.threads,
    )
    doc = {
        "config_echo": cfg.echo(),
        "constants": constants,
        "expansion": report,
        "timings": _work_counters(cfg),
        "pass": report.passed,
    }
    emit_json(doc, out_path)
    if cfg.csv_out:
        tower = tower_from_field(field, report.k, cfg.base)
        _dump_conorm_csv(cfg, build_f(tower, cfg.m, psi), metric)
    return 0 if report.passed else 1


def cmd_degree(cfg: RunConfig, out_path: str | None = None) -> int:
    field, h, metric, psi = _prepare(cfg)
    k = cfg.k if cfg.k is not None else 1
    tower = tower_from_field(field, k, cfg.base)
    f = build_f(tower, cfg.m, psi)
    rng = np.random.default_rng(cfg.seed)
    probe = MTPoint(0, float(rng.uniform(0.05, 0.95)), rng.uniform(0.0, 1.0, cfg.n))
    probe = f.source.normalize(probe)
    points = preimages(f, probe, newton_tol=cfg.newton_tol)
    expected = cfg.base ** (k * cfg.n) * (2 * cfg.m + 1)
    min_sep = np.inf
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            min_sep = min(min_sep, f.source.distance(points[i], points[j]))
    doc = {
        "config_echo": cfg.echo(),
        "degree": {
            "preimage_count": len(points),
            "expected": expected,
            "min_separation": float(min_sep),
            "pi1_linear_part": pi1_linear_part(f).tolist(),
            "probe": [probe.t, *probe.x],
        },
        "timings": _work_counters(cfg),
        "pass": len(points) == expected,
    }
    emit_json(doc, out_path)
    return 0 if len(points) == expected else 1


def cmd_orbit(cfg: RunConfig, start, steps: int,
              out_path: str | None = None) -> int:
    field, h, metric, psi = _prepare(cfg)
    k = cfg.k if cfg.k is not None else 1
    tower = tower_from_field(field, k, cfg.base)
    f = build_f(tower, cfg.m, psi)
    t0, x0 = start
    points = orbit(f, MTPoint(0, t0, np.asarray(x0, dtype=float)), steps)
    header = "t," + ",".join(f"x_{i + 1}" for i in range(cfg.n))
    _csv_rows([[p.t, *p.x] for p in points], header, out_path)
    return 0


def cmd_seams(cfg: RunConfig, out_path: str | None = None) -> int:
    field, h, metric, psi = _prepare(cfg)
    k = cfg.k if cfg.k is not None else 1
    tower = tower_from_field(field, k, cfg.base)
    inventory = build_stage_inventory(tower, cfg.m, psi)
    rng = np.random.default_rng(cfg.seed)
    gaps = {name: float(check_seams(cover, n_samples=500, rng=rng))
            for name, cover in inventory.items()}
    worst = max(gaps.values())
    doc = {
        "config_echo": cfg.echo(),
        "seams": gaps,
        "timings": _work_counters(cfg),
        "pass": worst < cfg.seam_tol,
    }
    emit_json(doc, out_path)
    return 0 if worst < cfg.seam_tol else 1


# ---------------------------------------------------------------------------
# Entry point


def _parse_start(text: str, n: int):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != n + 1:
        raise ConfigError(f"--start needs {n + 1} comma-separated numbers")
    return parts[0], parts[1:]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtcover",
        description="Expansion verification for self-covers of mapping tori.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("constants", "verify", "degree", "orbit", "seams"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--out", default=None, help="output path (default stdout)")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "orbit":
            p.add_argument("--start", default="0.1,0.1,0.1",
                           help="comma-separated t,x_1,...,x_n")
            p.add_argument("--steps", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = load_config(args.config, threads=args.threads, seed=args.seed)
        if args.command == "constants":
            code = cmd_constants(cfg, args.out)
        elif args.command == "verify":
            code = cmd_verify(cfg, args.out)
        elif args.command == "degree":
            code = cmd_degree(cfg, args.out)
        elif args.command == "orbit":
            code = cmd_orbit(cfg, _parse_start(args.start, cfg.n),
                             args.steps, args.out)
        else:
            code = cmd_seams(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (MTCoverError, AssertionError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    print(f"elapsed {time.perf_counter() - started:.3f}s", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
