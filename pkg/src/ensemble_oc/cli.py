"""Command-line interface: solve, verify, discretize, and benchmark.

Exit codes: 0 on success, 1 when a solve or certificate check fails, 2 on
usage or configuration errors.  Result directories hold ``summary.json``,
``control.csv``, ``trajectories.csv``, ``costates.csv``, plot-data CSVs, and
rendered figures; ``verify`` adds ``report.json``.
"""

from __future__ import annotations

import argparse
import sys as _sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ensemble_oc import plots
from ensemble_oc.adjoint import averaged_hamiltonian, maximize_hamiltonian
from ensemble_oc.benchmarks import BENCHMARKS, get_benchmark
from ensemble_oc.measure import (
    ProbabilityMeasure,
    discretize,
    weak_star_bound,
    weak_star_gap,
)
from ensemble_oc.problem_io import (
    ConfigError,
    load_measure_file,
    load_problem,
    read_certificate,
    summarize_result,
    write_control_csv,
    write_costates_csv,
    write_json,
    write_measure_csv,
    write_trajectories_csv,
)
from ensemble_oc.solver import SolveConfig, SolveResult, solve
from ensemble_oc.verify import Certificate, Tolerances, verify_all

__all__ = ["run", "main", "emit_plot_data"]

_FMT = lambda x: format(float(x), ".17g")


def _hamiltonian_profile(sys_, result: SolveResult, cfg: SolveConfig):
    ens, cost = result.ensemble, result.costates
    n_steps = result.control.grid.n_steps
    h_cur = np.empty(n_steps)
    h_max = np.empty(n_steps)
    for k in range(n_steps):
        h_cur[k] = averaged_hamiltonian(sys_, ens, cost, k, result.control.values[k])
        _, h_max[k] = maximize_hamiltonian(sys_, ens, cost, k,
                                           cfg.hamiltonian_grid, cfg.hamiltonian_tol)
    return h_cur, h_max


def _weakstar_rows(mu: ProbabilityMeasure, max_level: int):
    """Canonical per-axis diagnostics at doubling levels up to max_level."""
    d = mu.space.dimension
    if mu.kind == "atoms":
        box = np.stack([mu.atom_points.min(axis=0), mu.atom_points.max(axis=0)], axis=-1)
    else:
        box = mu.domain
    scale = float(np.max(np.abs(box))) if np.all(np.isfinite(box)) else 1.0
    tests = [("const", lambda w: 1.0, 0.0, 1.0)]
    for i in range(d):
        tests.append((f"w{i + 1}", lambda w, i=i: w[i], 1.0, scale))
        tests.append((f"abs_w{i + 1}", lambda w, i=i: abs(w[i]), 1.0, scale))
        tests.append((f"w{i + 1}_sq", lambda w, i=i: w[i] ** 2, 2.0 * scale, scale ** 2))
    levels = []
    lvl = 2
    while lvl <= max(2, max_level):
        levels.append(lvl)
        lvl *= 2
    rows = []
    for lvl in levels:
        mu_l = discretize(mu, lvl)
        gaps = weak_star_gap(mu, mu_l, [(h, L, M) for _, h, L, M in tests])
        for (name, _h, L, M), gap in zip(tests, gaps):
            rows.append((lvl, name, gap, weak_star_bound(lvl, L, M, mu_l.residual_mass)))
    return rows


def emit_plot_data(out_dir, sys_, result: SolveResult, cfg: SolveConfig,
                   mu: ProbabilityMeasure | None = None,
                   ladder: list[tuple[int, float]] | None = None) -> None:
    """Write plot-data CSVs and render the corresponding figures into the
    result directory: the Hamiltonian maximality profile, cost across
    refinement levels, and weak-star diagnostics of the measure."""
    out = Path(out_dir)
    nodes = result.control.grid.nodes

    if result.ensemble is not None and result.costates is not None:
        h_cur, h_max = _hamiltonian_profile(sys_, result, cfg)
        lines = ["t,h_control,h_max"]
        for k in range(len(h_cur)):
            lines.append(",".join([_FMT(nodes[k]), _FMT(h_cur[k]), _FMT(h_max[k])]))
        (out / "hamiltonian_profile.csv").write_text("\n".join(lines) + "\n")
        plots.render_hamiltonian_profile(out, nodes[:-1], h_cur, h_max)

        plots.render_control(out, nodes, result.control.values)
        plots.render_trajectories(out, nodes, result.ensemble.states,
                                  result.costates.costates)

    entries = ladder if ladder else [(result.level, result.cost)]
    lines = ["level,cost"]
    for lvl, cost in entries:
        lines.append(f"{lvl},{_FMT(cost)}")
    (out / "cost_vs_level.csv").write_text("\n".join(lines) + "\n")
    plots.render_cost_vs_level(out, [e[0] for e in entries], [e[1] for e in entries])

    if mu is not None:
        rows = _weakstar_rows(mu, result.level)
        lines = ["level,test,gap,bound"]
        for lvl, name, gap, bound in rows:
            lines.append(f"{lvl},{name},{_FMT(gap)},{_FMT(bound)}")
        (out / "weakstar_gaps.csv").write_text("\n".join(lines) + "\n")
        plots.render_weakstar_gaps(out, rows)


def _write_result(out_dir, sys_, result: SolveResult, cfg: SolveConfig,
                  mu: ProbabilityMeasure | None, extra: dict | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mu_l = result.ensemble.measure if result.ensemble is not None else None
    write_control_csv(out / "control.csv", result.control)
    if result.ensemble is not None:
        write_trajectories_csv(out / "trajectories.csv", result.ensemble)
        write_measure_csv(out / "measure.csv", mu_l)
    if result.costates is not None:
        write_costates_csv(out / "costates.csv", result.costates)
    if mu_l is not None:
        write_json(out / "summary.json",
                   summarize_result(result, mu_l, sys_.horizon, extra))
    emit_plot_data(out, sys_, result, cfg, mu=mu)


def _apply_overrides(cfg: SolveConfig, args) -> SolveConfig:
    updates = {}
    if getattr(args, "level", None) is not None:
        updates["level"] = args.level
    if getattr(args, "grid", None) is not None:
        updates["n_steps"] = args.grid
    if getattr(args, "tol", None) is not None:
        updates["maximality_target"] = args.tol
    if getattr(args, "max_sweeps", None) is not None:
        updates["max_sweeps"] = args.max_sweeps
    return replace(cfg, **updates) if updates else cfg


def _cmd_solve(args) -> int:
    problem = load_problem(args.problem)
    cfg = _apply_overrides(problem.config, args)
    result = solve(problem.system, problem.measure, cfg)
    _write_result(args.out, problem.system, result, cfg, problem.measure)
    print(f"status={result.status} cost={result.cost:.9g} "
          f"maximality_residual={result.maximality_residual:.3g} "
          f"constraint_residual={result.constraint_residual:.3g} "
          f"sweeps={result.sweeps}")
    if result.message:
        print(result.message)
    return 0 if result.status == "converged" else 1


def _cmd_verify(args) -> int:
    problem = load_problem(args.problem)
    cert = read_certificate(args.certificate, problem.system)
    tol = Tolerances.at(args.tol) if args.tol is not None else Tolerances()
    report = verify_all(cert, problem.system, tol, mode=args.mode)
    write_json(Path(args.certificate) / "report.json", report.to_dict())
    for name, ok in sorted(report.passes.items()):
        print(f"{name}: {'pass' if ok else 'FAIL'}")
    print(f"overall: {'pass' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def _cmd_discretize(args) -> int:
    mu = load_measure_file(args.measure)
    mu_l = discretize(mu, args.level)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    write_measure_csv(out, mu_l)
    print(f"wrote {len(mu_l)} atoms at level {args.level} to {out}")
    return 0


def _cmd_benchmark(args) -> int:
    try:
        entry = get_benchmark(args.name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    sys_, mu, cfg = entry.build()
    cfg = _apply_overrides(cfg, args)
    result = solve(sys_, mu, cfg)
    out_dir = args.out or f"{entry.name}-out"
    known = entry.known
    _write_result(out_dir, sys_, result, cfg, mu,
                  extra={"benchmark": entry.name, "known_cost": known["cost"],
                         "known_cost_tol": known["cost_tol"],
                         "provenance": known["provenance"]})

    cost_err = abs(result.cost - known["cost"])
    ok = cost_err <= known["cost_tol"]
    if known.get("require_converged", True):
        ok = ok and result.status == "converged"
    if "constraint_tol" in known:
        ok = ok and result.constraint_residual <= known["constraint_tol"]
    if result.status == "converged":
        report = verify_all(Certificate.from_result(result), sys_,
                            Tolerances.at(1e-5),
                            mode="atomic" if mu.kind == "atoms" else "smooth")
        write_json(Path(out_dir) / "report.json", report.to_dict())
        ok = ok and report.passed
    print(f"benchmark={entry.name} status={result.status} cost={result.cost:.9g} "
          f"known={known['cost']:.9g} |err|={cost_err:.3g} "
          f"({'pass' if ok else 'FAIL'})")
    return 0 if ok else 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ensemble-oc",
        description="Average-cost ensemble optimal control: discretize the "
                    "parameter measure, run the sweep solver, and check "
                    "stationarity certificates.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("solve", help="solve a problem file")
    p.add_argument("--problem", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-sweeps", type=int, dest="max_sweeps")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("verify", help="check a solve output directory")
    p.add_argument("--problem", required=True)
    p.add_argument("--certificate", required=True)
    p.add_argument("--tol", type=float)
    p.add_argument("--mode", choices=["smooth", "atomic"], default="smooth")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("discretize", help="write the finite-support measure")
    p.add_argument("--measure", required=True)
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_discretize)

    p = sub.add_parser("benchmark", help="run a registered benchmark")
    p.add_argument("--name", required=True,
                   help="one of: " + ", ".join(sorted(BENCHMARKS)))
    p.add_argument("--level", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--max-sweeps", type=int, dest="max_sweeps")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_benchmark)

    return parser


def run(argv=None) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if getattr(args, "command", None) is None or not hasattr(args, "func"):
        parser.print_usage(_sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
