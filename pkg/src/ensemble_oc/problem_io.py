"""Problem-file ingestion and delimited output.

Problems are JSON documents naming builtin dynamics and costs with parameter
maps; they are schema-validated before any numeric work and unknown keys are
rejected.  All delimited output uses 17-significant-digit floats so repeated
runs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from ensemble_oc.benchmarks import make_cost, make_dynamics
from ensemble_oc.measure import (
    FiniteSupportMeasure,
    ParameterSpace,
    ProbabilityMeasure,
)
from ensemble_oc.solver import SolveConfig, SolveResult
from ensemble_oc.system import (
    ConstraintSet,
    ControlFunction,
    ControlSet,
    ControlSystem,
    RegularityData,
    TimeGrid,
    TrajectoryEnsemble,
)
from ensemble_oc.adjoint import CostateEnsemble
from ensemble_oc.verify import Certificate

__all__ = [
    "ConfigError",
    "ProblemFile",
    "load_problem",
    "load_measure",
    "load_measure_file",
    "problem_to_dict",
    "write_problem",
    "write_control_csv",
    "write_trajectories_csv",
    "write_costates_csv",
    "write_measure_csv",
    "write_json",
    "read_certificate",
]


class ConfigError(ValueError):
    """Schema violation, unknown builtin, or otherwise unusable input."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


_BOUND_PAIR = {"type": "array", "items": {"type": "number"},
               "minItems": 2, "maxItems": 2}
_NUM_ARRAY = {"type": "array", "items": {"type": "number"}, "minItems": 1}

MEASURE_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["uniform", "atoms", "mixture", "truncated_gaussian"]},
        "domain": {"type": "array", "items": _BOUND_PAIR, "minItems": 1},
        "atoms": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"point": _NUM_ARRAY,
                               "weight": {"type": "number", "exclusiveMinimum": 0}},
                "required": ["point", "weight"],
                "additionalProperties": False,
            },
            "minItems": 1,
        },
        "mean": _NUM_ARRAY,
        "sigma": _NUM_ARRAY,
        "density": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["uniform", "truncated_gaussian"]},
                "domain": {"type": "array", "items": _BOUND_PAIR, "minItems": 1},
                "mean": _NUM_ARRAY,
                "sigma": _NUM_ARRAY,
            },
            "required": ["kind", "domain"],
            "additionalProperties": False,
        },
        "density_mass": {"type": "number", "exclusiveMinimum": 0},
        "quad_per_axis": {"type": "integer", "minimum": 2},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

PROBLEM_SCHEMA = {
    "type": "object",
    "properties": {
        "schema_version": {"type": "integer", "minimum": 1, "maximum": 1},
        "state_dim": {"type": "integer", "exclusiveMinimum": 0},
        "control_dim": {"type": "integer", "exclusiveMinimum": 0},
        "horizon": {"type": "number", "exclusiveMinimum": 0},
        "x0": _NUM_ARRAY,
        "dynamics": {
            "type": "object",
            "properties": {"builtin": {"type": "string"}, "params": {"type": "object"}},
            "required": ["builtin"],
            "additionalProperties": False,
        },
        "cost": {
            "type": "object",
            "properties": {"builtin": {"type": "string"}, "params": {"type": "object"}},
            "required": ["builtin"],
            "additionalProperties": False,
        },
        "control": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["box", "finite"]},
                "lo": _NUM_ARRAY,
                "hi": _NUM_ARRAY,
                "values": {"type": "array", "items": _NUM_ARRAY, "minItems": 1},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "constraint": {
            "type": "object",
            "properties": {
                "kind": {"enum": ["none", "point", "box", "halfspace"]},
                "target": _NUM_ARRAY,
                "lo": _NUM_ARRAY,
                "hi": _NUM_ARRAY,
                "normal": _NUM_ARRAY,
                "offset": {"type": "number"},
            },
            "required": ["kind"],
            "additionalProperties": False,
        },
        "regularity": {
            "type": "object",
            "properties": {
                "c": {"type": "number", "minimum": 0},
                "k_f": {"type": "number", "minimum": 0},
                "k_g": {"type": "number", "minimum": 1},
                "M": {"type": "number", "minimum": 0},
                "delta": {"type": "number", "minimum": 0},
                "k_omega": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "measure": MEASURE_SCHEMA,
        "solve": {
            "type": "object",
            "properties": {
                "level": {"type": "integer", "minimum": 1},
                "grid": {"type": "integer", "minimum": 1},
                "max_sweeps": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "constraint_tol": {"type": "number", "exclusiveMinimum": 0},
                "penalty_init": {"type": "number", "exclusiveMinimum": 0},
                "penalty_growth": {"type": "number", "exclusiveMinimum": 1},
                "max_outer": {"type": "integer", "minimum": 1},
                "min_damping": {"type": "number", "exclusiveMinimum": 0},
                "initial_control": {
                    "oneOf": [{"type": "number"}, _NUM_ARRAY],
                },
            },
            "additionalProperties": False,
        },
    },
    "required": ["state_dim", "control_dim", "horizon", "x0", "dynamics",
                 "cost", "control", "measure"],
    "additionalProperties": False,
}


def _validate(instance: dict, schema: dict, what: str) -> None:
    try:
        jsonschema.validate(instance, schema)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{what} schema violation at {path}: {exc.message}") from exc


def _gaussian_density(mean: np.ndarray, sigma: np.ndarray):
    mean = np.asarray(mean, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise ConfigError("gaussian sigma must be positive")

    def dens(pts):
        z = (pts - mean[None, :]) / sigma[None, :]
        return np.exp(-0.5 * np.sum(z * z, axis=1))

    return dens


def load_measure(doc: dict) -> ProbabilityMeasure:
    """Build a measure from its JSON description (already parsed)."""
    _validate(doc, MEASURE_SCHEMA, "measure")
    kind = doc["kind"]
    quad = int(doc.get("quad_per_axis", 1024))
    if kind == "atoms":
        pts = [a["point"] for a in doc["atoms"]]
        ws = [a["weight"] for a in doc["atoms"]]
        return ProbabilityMeasure.from_atoms(pts, ws)
    if kind == "uniform":
        if "domain" not in doc:
            raise ConfigError("uniform measure requires a domain")
        return ProbabilityMeasure.uniform(doc["domain"], quad_per_axis=quad)
    if kind == "truncated_gaussian":
        if "domain" not in doc or "mean" not in doc or "sigma" not in doc:
            raise ConfigError("truncated_gaussian requires domain, mean, and sigma")
        dens = _gaussian_density(doc["mean"], doc["sigma"])
        return ProbabilityMeasure.from_density(doc["domain"], dens, quad_per_axis=quad)
    # mixture
    if "atoms" not in doc or "density" not in doc or "density_mass" not in doc:
        raise ConfigError("mixture requires atoms, density, and density_mass")
    sub = doc["density"]
    if sub["kind"] == "uniform":
        dom = np.asarray(sub["domain"], dtype=float)
        vol = float(np.prod(dom[:, 1] - dom[:, 0]))
        dens = lambda pts: np.full(len(pts), 1.0 / vol)
    else:
        if "mean" not in sub or "sigma" not in sub:
            raise ConfigError("truncated_gaussian requires mean and sigma")
        dens = _gaussian_density(sub["mean"], sub["sigma"])
    pts = [a["point"] for a in doc["atoms"]]
    ws = [a["weight"] for a in doc["atoms"]]
    mix = ProbabilityMeasure.mixture(pts, ws, sub["domain"], dens,
                                     float(doc["density_mass"]), quad_per_axis=quad)
    if sub["kind"] == "truncated_gaussian":
        # normalize the unnormalized bell on its box
        z = mix._raw_domain_mass()
        mix._norm = 1.0 / z
    return mix


def load_measure_file(path) -> ProbabilityMeasure:
    doc = _read_json(path, "measure")
    return load_measure(doc)


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{what} file not found: {path}")
    text = path.read_text()
    if not text.strip():
        raise ConfigError(f"{what} file is empty: {path}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON "
                          f"(line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc


@dataclass
class ProblemFile:
    """Parsed problem: system, measure, solve configuration, provenance."""

    system: ControlSystem
    measure: ProbabilityMeasure
    config: SolveConfig
    source: str
    schema_version: int
    document: dict = field(repr=False, default_factory=dict)


_SOLVE_KEYS = {
    "level": "level",
    "grid": "n_steps",
    "max_sweeps": "max_sweeps",
    "tol": "maximality_target",
    "constraint_tol": "constraint_tol",
    "penalty_init": "penalty_init",
    "penalty_growth": "penalty_growth",
    "max_outer": "max_outer",
    "min_damping": "min_damping",
    "initial_control": "initial_control",
}


def _config_from(doc: dict) -> SolveConfig:
    kwargs = {}
    for key, attr in _SOLVE_KEYS.items():
        if key in doc:
            kwargs[attr] = doc[key]
    return SolveConfig(**kwargs)


def problem_from_dict(doc: dict, source: str = "<memory>") -> ProblemFile:
    _validate(doc, PROBLEM_SCHEMA, "problem")
    n = doc["state_dim"]
    m = doc["control_dim"]
    x0 = np.asarray(doc["x0"], dtype=float)
    if len(x0) != n:
        raise ConfigError(f"x0 has {len(x0)} components, state_dim is {n}")

    try:
        dyn = make_dynamics(doc["dynamics"]["builtin"],
                            doc["dynamics"].get("params", {}), n, m)
        cost = make_cost(doc["cost"]["builtin"], doc["cost"].get("params", {}), n)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    ctl = doc["control"]
    try:
        if ctl["kind"] == "box":
            if "lo" not in ctl or "hi" not in ctl:
                raise ConfigError("box control set requires lo and hi")
            cset = ControlSet("box", lo=ctl["lo"], hi=ctl["hi"])
        else:
            if "values" not in ctl:
                raise ConfigError("finite control set requires values")
            cset = ControlSet("finite", values=ctl["values"])
        if cset.dim != m:
            raise ConfigError(f"control set dimension {cset.dim} != control_dim {m}")

        cons_doc = doc.get("constraint", {"kind": "none"})
        if cons_doc["kind"] == "none":
            constraint = None
        else:
            constraint = ConstraintSet(
                cons_doc["kind"],
                target=cons_doc.get("target"),
                lo=cons_doc.get("lo"),
                hi=cons_doc.get("hi"),
                normal=cons_doc.get("normal"),
                offset=float(cons_doc.get("offset", 0.0)),
            )

        reg_doc = doc.get("regularity")
        regularity = RegularityData(**reg_doc) if reg_doc else None

        system = ControlSystem(
            state_dim=n, control_dim=m, horizon=float(doc["horizon"]), x0=x0,
            f=dyn.f, jac_x=dyn.jac_x, g=cost.g, grad_g=cost.grad_g,
            control_set=cset, constraint=constraint, regularity=regularity,
        )
        measure = load_measure(doc["measure"])
        config = _config_from(doc.get("solve", {}))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return ProblemFile(system, measure, config, source,
                       int(doc.get("schema_version", 1)), document=doc)


def load_problem(path) -> ProblemFile:
    doc = _read_json(path, "problem")
    return problem_from_dict(doc, source=str(path))


def problem_to_dict(problem: ProblemFile) -> dict:
    """Canonical dictionary form; loading it reproduces the configuration."""
    return json.loads(json.dumps(problem.document, sort_keys=True))


def write_problem(path, problem: ProblemFile) -> None:
    write_json(path, problem_to_dict(problem))


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_control_csv(path, control: ControlFunction) -> None:
    grid = control.grid
    m = control.values.shape[1]
    lines = ["t," + ",".join(f"u_{i + 1}" for i in range(m))]
    for k in range(grid.n_steps):
        row = [_fmt(grid.nodes[k])] + [_fmt(v) for v in control.values[k]]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def _write_indexed_arrays(path, nodes: np.ndarray, arrays: np.ndarray, prefix: str) -> None:
    n = arrays.shape[2]
    lines = ["t,omega_index," + ",".join(f"{prefix}_{i + 1}" for i in range(n))]
    for j in range(arrays.shape[0]):
        for k in range(arrays.shape[1]):
            row = [_fmt(nodes[k]), str(j)] + [_fmt(v) for v in arrays[j, k]]
            lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_trajectories_csv(path, ens: TrajectoryEnsemble) -> None:
    _write_indexed_arrays(path, ens.control.grid.nodes, ens.states, "x")


def write_costates_csv(path, costates: CostateEnsemble) -> None:
    _write_indexed_arrays(path, costates.ensemble.control.grid.nodes,
                          costates.costates, "p")


def write_measure_csv(path, mu_l: FiniteSupportMeasure) -> None:
    d = mu_l.space.dimension
    lines = [",".join(f"omega_{i + 1}" for i in range(d)) + ",weight"]
    for atom, w in zip(mu_l.atoms, mu_l.weights):
        lines.append(",".join(_fmt(v) for v in atom) + "," + _fmt(w))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_indexed_arrays(path, n_cols: int):
    rows = Path(path).read_text().strip().splitlines()[1:]
    data = np.array([[float(v) for v in line.split(",")] for line in rows])
    idx = data[:, 1].astype(int)
    n_atoms = idx.max() + 1
    per_atom = len(rows) // n_atoms
    arrays = data[:, 2:2 + n_cols].reshape(n_atoms, per_atom, n_cols)
    nodes = data[:per_atom, 0]
    return nodes, arrays


def read_certificate(out_dir, system: ControlSystem) -> Certificate:
    """Rebuild a certificate from a solve output directory."""
    out_dir = Path(out_dir)
    summary = _read_json(out_dir / "summary.json", "summary")
    for key in ("lambda", "level", "grid", "horizon", "atoms", "weights"):
        if key not in summary:
            raise ConfigError(f"summary.json lacks {key!r}")
    grid = TimeGrid(int(summary["grid"]), float(summary["horizon"]))

    control_rows = (out_dir / "control.csv").read_text().strip().splitlines()[1:]
    values = np.array([[float(v) for v in line.split(",")[1:]] for line in control_rows])
    control = ControlFunction(grid, values)

    atoms = np.asarray(summary["atoms"], dtype=float)
    weights = np.asarray(summary["weights"], dtype=float)
    space = ParameterSpace(atoms.shape[1])
    mu_l = FiniteSupportMeasure(space, atoms, weights, int(summary["level"]))

    _, states = _read_indexed_arrays(out_dir / "trajectories.csv", system.state_dim)
    _, costates = _read_indexed_arrays(out_dir / "costates.csv", system.state_dim)
    ens = TrajectoryEnsemble(states, control, mu_l)
    cens = CostateEnsemble(costates, float(summary["lambda"]), ens)
    return Certificate(float(summary["lambda"]), control, ens, cens, mu_l)


def summarize_result(result: SolveResult, mu_l: FiniteSupportMeasure,
                     horizon: float, extra: dict | None = None) -> dict:
    doc = {
        "schema_version": 1,
        "status": result.status,
        "message": result.message,
        "cost": result.cost,
        "constraint_residual": result.constraint_residual,
        "maximality_residual": result.maximality_residual,
        "lambda": result.lam,
        "level": result.level,
        "grid": result.control.grid.n_steps,
        "horizon": horizon,
        "sweeps": result.sweeps,
        "cost_history": [float(c) for c in result.cost_history],
        "penalty_history": [float(p) for p in result.penalty_history],
        "atoms": [[float(v) for v in atom] for atom in mu_l.atoms],
        "weights": [float(w) for w in mu_l.weights],
    }
    if extra:
        doc.update(extra)
    return doc
