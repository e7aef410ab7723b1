"""Experiment runner and reproduction harness.

Configuration files are flat key = value text organized in [sections];
every key must belong to the documented grammar (unknown keys are
rejected, exit code 2).  Each run writes CSV tables with a fixed column
order and 17 significant digits, plus a JSON summary carrying versions,
seeds, tolerances and per-assertion outcomes.  Reruns with the same config
and seed produce identical CSV bytes; the timestamp lives only in the
summary.

Exit codes: 0 success, 1 assertion failure (the failing criterion is
named), 2 configuration error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import acceptance
from . import calderon as cal
from . import certify, quadratic, solvers
from .errors import ConfigError
from .hilbert import build_grid_1d, build_grid_2d
from .internal import (
    alpha_study,
    assemble_internal_operator,
    build_internal_problem,
    find_condition_interval,
    make_measurements,
    recover_internal,
    run_delta_sweep,
    sufficient_condition,
)
from .pde1d import constant_potential, step_potential

log = logging.getLogger("liftrec")

KNOWN_KEYS = {
    "experiment": {"kind", "task"},
    "grid": {"n", "nx", "ny"},
    "potential": {"type", "base", "q0", "jump_lo", "jump_hi", "value", "coeffs",
                  "g_functional"},
    "boundary": {"f_a", "f_b", "n_modes", "m_basis"},
    "noise": {"delta", "deltas", "c", "seeds"},
    "phaselift": {"n", "m"},
    "solver": {"max_iter", "tol_feas", "tol_gap", "tol_fp", "rho", "momentum"},
    "sweep": {"q0_values", "n_list", "alphas"},
}


@dataclass
class ExperimentConfig:
    """Validated view of a configuration file; see KNOWN_KEYS for the grammar."""

    sections: dict = dc_field(default_factory=dict)

    def get(self, section, key, default=None, cast=str):
        raw = self.sections.get(section, {}).get(key)
        if raw is None:
            return default
        if cast is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"cannot parse boolean {section}.{key} = {raw!r}")
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse {section}.{key} = {raw!r}") from exc

    def get_list(self, section, key, default=(), cast=float):
        raw = self.sections.get(section, {}).get(key)
        if raw is None or raw.strip() == "":
            return list(default)
        try:
            return [cast(tok.strip()) for tok in raw.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"cannot parse list {section}.{key} = {raw!r}") from exc


def parse_config(text):
    """Parse and validate the flat sectioned key = value format."""
    sections = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in KNOWN_KEYS:
                raise ConfigError(f"line {lineno}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        if current is None:
            raise ConfigError(f"line {lineno}: key outside of any section")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS[current]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{current}]")
        sections[current][key] = value
    return ExperimentConfig(sections=sections)


def load_config(path):
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# table emission


def _format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def emit_table(rows, schema, path):
    """Write rows as CSV with a fixed column order and 17 significant digits.

    ``schema`` is a list of (name, type) pairs; every row must supply every
    column.  Round-tripping through :func:`read_table` reproduces the data.
    """
    names = [name for name, _ in schema]
    for row in rows:
        missing = set(names) - set(row)
        if missing:
            raise ValueError(f"row is missing columns {sorted(missing)}")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in rows:
            writer.writerow([_format_value(row[name]) for name in names])


def read_table(path, schema):
    """Inverse of :func:`emit_table` for the same schema."""
    casts = dict(schema)
    out = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for record in reader:
            row = {}
            for name, cast in schema:
                raw = record[name]
                if cast is bool:
                    row[name] = raw == "1"
                else:
                    row[name] = cast(raw)
            out.append(row)
    return out


def _write_summary(out_dir, payload):
    payload = dict(payload)
    payload["versions"] = {
        "liftrec": __import__("liftrec").__version__,
        "numpy": np.__version__,
        "python": sys.version.split()[0],
    }
    payload["timestamp"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


# ---------------------------------------------------------------------------
# experiment pieces


def _solver_options(config):
    return solvers.SolverOptions(
        max_iter=config.get("solver", "max_iter", 50_000, int),
        tol_feas=config.get("solver", "tol_feas", 1e-8, float),
        tol_gap=config.get("solver", "tol_gap", 1e-6, float),
        tol_fp=config.get("solver", "tol_fp", 1e-8, float),
        rho=config.get("solver", "rho", 0.0, float),
        momentum=config.get("solver", "momentum", True, bool),
    )


def _potential_for(config, grid):
    kind = config.get("potential", "type", "step")
    base = config.get("potential", "base", 1.0, float)
    if kind == "step":
        return step_potential(
            grid, base=base,
            q0=config.get("potential", "q0", 0.5, float),
            lo=config.get("potential", "jump_lo", 0.4, float),
            hi=config.get("potential", "jump_hi", 0.6, float),
        )
    if kind == "constant":
        return constant_potential(grid, config.get("potential", "value", 1.0, float))
    raise ConfigError(f"unsupported 1-D potential type {kind!r}")


INTERNAL_SCHEMA = [
    ("q0", float), ("lhs", float), ("pass", bool), ("w_norm", float),
    ("err_L2", float), ("delta", float), ("lambda", float), ("iters", int),
]


def _internal_row(config, q0, delta, seed, c, opts):
    grid = build_grid_1d(config.get("grid", "n", 41, int), 0.0, 1.0)
    base = config.get("potential", "base", 1.0, float)
    lo = config.get("potential", "jump_lo", 0.4, float)
    hi = config.get("potential", "jump_hi", 0.6, float)
    q = step_potential(grid, base=base, q0=q0, lo=lo, hi=hi)
    problem, _ = build_internal_problem(
        grid, q,
        f_a=config.get("boundary", "f_a", 1.0, float),
        f_b=config.get("boundary", "f_b", 1.0, float),
    )
    meas = make_measurements(problem, delta=delta, seed=seed)
    lhs, _, passed = sufficient_condition(problem)
    op = assemble_internal_operator(problem)
    try:
        cert = certify.precertificate(op, [problem.model])
        w_norm = cert.max_w_norm
    except certify.DegenerateCertificate:
        w_norm = float("nan")
    mode = "exact" if delta == 0 else "noisy"
    q_hat, _, report = recover_internal(problem, meas, mode=mode, c=c, opts=opts)
    err = problem.l2.norm(q_hat.values - problem.q_true.values)
    return {
        "q0": q0, "lhs": lhs, "pass": passed, "w_norm": w_norm, "err_L2": err,
        "delta": delta, "lambda": (0.0 if delta == 0 else c * delta),
        "iters": report.iterations,
    }


def run_internal(config, out_dir, seed, jobs, task):
    opts = _solver_options(config)
    c = config.get("noise", "c", 1.0, float)
    if task == "certify":
        grid = build_grid_1d(config.get("grid", "n", 41, int), 0.0, 1.0)
        problem, _ = build_internal_problem(
            grid, _potential_for(config, grid),
            f_a=config.get("boundary", "f_a", 1.0, float),
            f_b=config.get("boundary", "f_b", 1.0, float),
        )
        op = assemble_internal_operator(problem)
        cert = certify.precertificate(op, [problem.model])
        lhs_n, lhs_u, cond_pass = sufficient_condition(problem)
        study = alpha_study(problem)
        emit_table(
            [{"alpha": r["alpha"], "exact": r["exact"], "bound": r["bound"]}
             for r in study["rows"]],
            [("alpha", float), ("exact", float), ("bound", float)],
            os.path.join(out_dir, "alpha_study.csv"),
        )
        report = {
            "w_norm": cert.w_norms.tolist(),
            "sigma_min": cert.sigma_min,
            "tangent_residuals": cert.tangent_residuals.tolist(),
            "ndsc_pass": cert.ndsc_pass,
            "condition_lhs": lhs_n,
            "condition_lhs_unnormalized": lhs_u,
            "condition_pass": cond_pass,
            "alpha_star": study["alpha_star"],
            "exact_at_star": study["exact_at_star"],
        }
        with open(os.path.join(out_dir, "certificate.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, default=_json_default)
            fh.write("\n")
        _write_summary(out_dir, {"kind": "internal", "task": task, "seed": seed,
                                 "assertions": {"ndsc_pass": cert.ndsc_pass}})
        return 0

    if task == "recover":
        deltas = config.get_list("noise", "deltas", default=())
        if not deltas:
            deltas = [config.get("noise", "delta", 0.0, float)]
        q0 = config.get("potential", "q0", 0.5, float)
        rows = [
            _internal_row(config, q0, delta, seed + i, c, opts)
            for i, delta in enumerate(deltas)
        ]
        emit_table(rows, INTERNAL_SCHEMA, os.path.join(out_dir, "recover.csv"))
        _write_summary(out_dir, {"kind": "internal", "task": task, "seed": seed,
                                 "rows": len(rows)})
        return 0

    if task == "sweep":
        q0_values = config.get_list("sweep", "q0_values", default=(-0.3, 0.3, 0.5))
        deltas = config.get_list("noise", "deltas", default=(0.0,))
        tasks = [(q0, delta, seed + k) for k, (q0, delta) in enumerate(
            (a, b) for a in q0_values for b in deltas
        )]

        def one(args):
            q0, delta, task_seed = args
            return _internal_row(config, q0, delta, task_seed, c, opts)

        if jobs > 1:
            with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
                rows = list(pool.map(one, tasks))
        else:
            rows = [one(t) for t in tasks]
        emit_table(rows, INTERNAL_SCHEMA, os.path.join(out_dir, "sweep.csv"))
        _write_summary(out_dir, {"kind": "internal", "task": task, "seed": seed,
                                 "rows": len(rows)})
        return 0
    raise ConfigError(f"unknown internal task {task!r}")


def run_calderon(config, out_dir, seed, jobs, task):
    grid = build_grid_2d(
        config.get("grid", "nx", 17, int), config.get("grid", "ny", 17, int)
    )
    m = config.get("boundary", "m_basis", 4, int)
    n_modes = config.get("boundary", "n_modes", 4, int)
    coeffs = config.get_list("potential", "coeffs", default=())
    q_coeffs = np.asarray(coeffs) if coeffs else None
    g_kind = config.get("potential", "g_functional", "integral")
    if g_kind == "integral":
        g_weights = None
    elif g_kind == "subdomain":
        # integration restricted to the central quarter of the square
        mask = (np.abs(grid.xs - 0.5 * (grid.a + grid.b)) <= 0.25 * (grid.b - grid.a)) \
            & (np.abs(grid.ys - 0.5 * (grid.a + grid.b)) <= 0.25 * (grid.b - grid.a))
        g_weights = grid.area_weights * mask
    else:
        raise ConfigError(f"unknown g_functional {g_kind!r}")
    problem = cal.build_calderon_problem(grid, m=m, n_modes=n_modes,
                                         q_coeffs=q_coeffs, g_weights=g_weights)

    if task == "forward":
        rows = []
        for i in range(problem.n_data):
            rows.append({
                "datum": i,
                "flux_norm": float(np.linalg.norm(
                    np.sqrt(grid.boundary_weights) * problem.flux_u[i])),
                "state_min": float(problem.u_stack[i].min()),
                "state_max": float(problem.u_stack[i].max()),
            })
        emit_table(rows, [("datum", int), ("flux_norm", float),
                          ("state_min", float), ("state_max", float)],
                   os.path.join(out_dir, "forward.csv"))
        _write_summary(out_dir, {"kind": "calderon", "task": task, "seed": seed})
        return 0

    if task == "certify":
        n_list = [int(v) for v in config.get_list("sweep", "n_list",
                                                  default=(2, 3, 4), cast=float)]
        rows = cal.precertificate_study(grid, m, problem.q_coeffs, n_list)
        emit_table(
            [{k: row.get(k, float("nan")) for k in
              ("N", "sigma_min", "max_w_norm", "max_tangent_residual", "ndsc_pass")}
             for row in rows],
            [("N", int), ("sigma_min", float), ("max_w_norm", float),
             ("max_tangent_residual", float), ("ndsc_pass", bool)],
            os.path.join(out_dir, "certify.csv"),
        )
        _write_summary(out_dir, {
            "kind": "calderon", "task": task, "seed": seed,
            "boundary_restriction_constant":
                cal.boundary_restriction_constant(problem),
        })
        return 0

    if task == "recover":
        system = cal.assemble_calderon_system(problem)
        delta = config.get("noise", "delta", 0.0, float)
        c = config.get("noise", "c", 1.0, float)
        meas = cal.make_calderon_measurements(problem, system, delta=delta, seed=seed)
        mode = "exact" if delta == 0 else "noisy"
        q_hat, _, report = cal.recover_calderon(
            problem, system, meas, mode=mode, c=c, opts=_solver_options(config)
        )
        err = float(np.linalg.norm(q_hat - problem.q_coeffs)
                    / np.linalg.norm(problem.q_coeffs))
        rows = [{
            "delta": delta, "lambda": (0.0 if delta == 0 else c * delta),
            "rel_err_W": err, "iters": report.iterations,
            "feas_residual": report.feas_residual, "status": report.status,
        }]
        emit_table(rows, [("delta", float), ("lambda", float), ("rel_err_W", float),
                          ("iters", int), ("feas_residual", float), ("status", str)],
                   os.path.join(out_dir, "recover.csv"))
        _write_summary(out_dir, {"kind": "calderon", "task": task, "seed": seed,
                                 "assertions": {"converged": report.status}})
        return 0

    if task == "baseline":
        rng = np.random.default_rng(seed)
        q_init = problem.q_coeffs + 0.1 * rng.standard_normal(problem.q_coeffs.size)
        history = cal.gauss_newton_baseline(problem, q_init)
        rows = [{"iteration": i, "misfit": mf}
                for i, mf in enumerate(history["misfits"])]
        emit_table(rows, [("iteration", int), ("misfit", float)],
                   os.path.join(out_dir, "baseline.csv"))
        _write_summary(out_dir, {"kind": "calderon", "task": task, "seed": seed})
        return 0
    raise ConfigError(f"unknown calderon task {task!r}")


def run_phaselift(config, out_dir, seed, jobs, n=None, m=None, noise=None):
    n = n if n is not None else config.get("phaselift", "n", 5, int)
    m = m if m is not None else config.get("phaselift", "m", 20, int)
    if noise is not None:
        deltas = [noise]
    else:
        deltas = config.get_list("noise", "deltas", default=())
        if not deltas:
            deltas = [config.get("noise", "delta", 0.0, float)]
    opts = _solver_options(config)
    inst = quadratic.make_phase_retrieval(n, m, seed)
    rows = []
    for i, delta in enumerate(deltas):
        if delta == 0:
            x_hat, _, report = quadratic.recover_phaselift(inst, opts=opts)
        else:
            z_noisy = quadratic.add_noise(inst, delta, seed + 1 + i)
            x_hat, _, report = quadratic.recover_phaselift(
                inst, mode="regularized", lam=delta, z=z_noisy, opts=opts
            )
        rows.append({
            "n": n, "m": m, "delta": delta,
            "err": quadratic.sign_aligned_error(x_hat, inst.x_true),
            "rank_ratio": report.extras["rank_ratio"],
            "iters": report.iterations,
        })
    emit_table(rows, [("n", int), ("m", int), ("delta", float), ("err", float),
                      ("rank_ratio", float), ("iters", int)],
               os.path.join(out_dir, "phaselift.csv"))
    _write_summary(out_dir, {"kind": "phaselift", "seed": seed, "rows": len(rows)})
    return 0


def run_certify(config, out_dir, seed, jobs):
    """Top-level certificate report for the internal geometry."""
    code = run_internal(config, out_dir, seed, jobs, "certify")
    t0 = time.time()
    lower, upper = find_condition_interval(
        n=config.get("grid", "n", 401, int)
    )
    with open(os.path.join(out_dir, "interval.json"), "w", encoding="utf-8") as fh:
        json.dump({"q0_lower": lower, "q0_upper": upper,
                   "seconds": time.time() - t0}, fh, indent=2)
        fh.write("\n")
    return code


def run_selftest(config, out_dir, seed, jobs):
    indices = None
    results = acceptance.run_all(indices=indices)
    if out_dir is not None:
        payload = {
            "kind": "selftest", "seed": seed,
            "assertions": {
                f"criterion_{r.index}": ("pass" if r.passed else "fail")
                for r in results
            },
            "details": {f"criterion_{r.index}": r.details for r in results},
        }
        _write_summary(out_dir, payload)
    failing = [r for r in results if not r.passed]
    if failing:
        print(f"FAILED: criterion {failing[0].index} ({failing[0].name})",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="liftrec",
        description="Coefficient recovery by convex lifting: experiment runner.",
    )
    parser.add_argument("--config", default=None, help="configuration file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=0, help="base random seed")
    parser.add_argument("--jobs", type=int, default=1, help="worker count for sweeps")
    sub = parser.add_subparsers(dest="command", required=True)

    p_int = sub.add_parser("internal", help="internal-measurement experiments")
    p_int.add_argument("task", choices=["certify", "recover", "sweep"])
    p_cal = sub.add_parser("calderon", help="boundary-measurement experiments")
    p_cal.add_argument("task", choices=["forward", "recover", "certify", "baseline"])
    p_pl = sub.add_parser("phaselift", help="quadratic/phase-retrieval baseline")
    p_pl.add_argument("--n", type=int, default=None, help="ambient dimension")
    p_pl.add_argument("--m", type=int, default=None, help="measurement count")
    p_pl.add_argument("--noise", type=float, default=None, help="noise level")
    sub.add_parser("certify", help="certificate report for the internal geometry")
    sub.add_parser("selftest", help="run the acceptance suite")
    return parser


def main(argv=None):
    level = os.environ.get("LIFTREC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)

    try:
        if args.command == "internal":
            return run_internal(config, out_dir, args.seed, args.jobs, args.task)
        if args.command == "calderon":
            return run_calderon(config, out_dir, args.seed, args.jobs, args.task)
        if args.command == "phaselift":
            return run_phaselift(config, out_dir, args.seed, args.jobs,
                                 n=args.n, m=args.m, noise=args.noise)
        if args.command == "certify":
            return run_certify(config, out_dir, args.seed, args.jobs)
        if args.command == "selftest":
            return run_selftest(config, out_dir, args.seed, args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
