"""Probability measures on parameter boxes and nested finite-support approximations.

A measure on the parameter space is purely atomic, a density on an
axis-aligned box, or a mixture of the two.  ``discretize`` lumps the mass
into partition cells of diameter <= 1/level and returns the corresponding
convex combination of point masses.  ``DiracApproximationSequence`` chains
discretizations across increasing levels so that every atom set is contained
in the next one, which is what downstream certificate computations rely on
when they refine a solve.

All integrals against densities use a composite midpoint rule whose nodes are
aligned with the partition cells, so cell masses and whole-domain integrals
are mutually consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ParameterSpace",
    "ProbabilityMeasure",
    "FiniteSupportMeasure",
    "DiracApproximationSequence",
    "discretize",
    "build_sequence",
    "integrate",
    "weak_star_gap",
    "weak_star_bound",
]

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class ParameterSpace:
    """Metric space the parameters live in: R^d with the Euclidean metric, or
    a finite label set with the discrete metric."""

    dimension: int
    metric: str = "euclidean"
    bounds: np.ndarray | None = None  # (d, 2) box hull of the effective support

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be a positive integer")
        if self.metric not in ("euclidean", "discrete"):
            raise ValueError(f"unknown metric {self.metric!r}")
        if self.bounds is not None:
            b = np.asarray(self.bounds, dtype=float)
            if b.shape != (self.dimension, 2):
                raise ValueError("bounds must have shape (dimension, 2)")
            object.__setattr__(self, "bounds", b)

    def distance(self, a, b) -> float:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.metric == "euclidean":
            return float(np.linalg.norm(a - b))
        return 0.0 if np.array_equal(a, b) else 1.0


def _as_points(points, dimension: int) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != dimension:
        raise ValueError(f"points must have {dimension} coordinates")
    return pts


def _midpoint_axis_nodes(lo: float, hi: float, n_cells: int, per_cell: int):
    """Midpoint nodes aligned with ``n_cells`` equal cells, ``per_cell`` nodes each."""
    total = n_cells * per_cell
    step = (hi - lo) / total
    return lo + step * (np.arange(total) + 0.5), step


class ProbabilityMeasure:
    """Probability measure on a box: atoms, a density, or a mixture of both.

    Densities are normalized at construction (via the same midpoint
    quadrature used everywhere else), so the total-mass invariant holds by
    construction.  Density callables should accept an ``(N, d)`` array and
    return ``(N,)``; scalar-only callables are wrapped automatically.
    """

    def __init__(
        self,
        space: ParameterSpace,
        kind: str,
        *,
        atom_points: np.ndarray | None = None,
        atom_weights: np.ndarray | None = None,
        domain: np.ndarray | None = None,
        density_fn: Callable | None = None,
        density_mass: float = 0.0,
        quad_per_axis: int = 1024,
        trim_rule: Callable[[int], np.ndarray] | None = None,
        _pre_normalized: bool = False,
    ):
        if kind not in ("atoms", "density", "mixture"):
            raise ValueError(f"unknown measure kind {kind!r}")
        self.space = space
        self.kind = kind
        self.quad_per_axis = int(quad_per_axis)
        self.trim_rule = trim_rule
        self._norm = 1.0

        d = space.dimension
        if kind in ("atoms", "mixture"):
            if atom_points is None or atom_weights is None:
                raise ValueError("atomic part requires points and weights")
            self.atom_points = _as_points(atom_points, d)
            self.atom_weights = np.asarray(atom_weights, dtype=float)
            if self.atom_weights.ndim != 1 or len(self.atom_weights) != len(self.atom_points):
                raise ValueError("one weight per atom required")
            if np.any(self.atom_weights <= 0):
                raise ValueError("atom weights must be strictly positive")
        else:
            self.atom_points = np.empty((0, d))
            self.atom_weights = np.empty((0,))

        if kind in ("density", "mixture"):
            if domain is None or density_fn is None:
                raise ValueError("density part requires a domain and a density function")
            self.domain = np.asarray(domain, dtype=float).reshape(d, 2)
            self.density_fn = self._wrap_density(density_fn)
            self.density_mass = 1.0 if kind == "density" else float(density_mass)
            if self.density_mass <= 0:
                raise ValueError("density part must carry positive mass")
            if self._bounded_domain() and not _pre_normalized:
                z = self._raw_domain_mass()
                if not (z > 0 and np.isfinite(z)):
                    raise ValueError("density does not have positive finite mass on its domain")
                self._norm = 1.0 / z
        else:
            self.domain = None
            self.density_fn = None
            self.density_mass = 0.0

        total = float(self.atom_weights.sum()) + self.density_mass
        if abs(total - 1.0) > _MASS_TOL:
            raise ValueError(f"total mass must be 1, got {total}")

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_atoms(cls, points, weights, space: ParameterSpace | None = None):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if space is None:
            space = ParameterSpace(pts.shape[1])
        return cls(space, "atoms", atom_points=pts, atom_weights=weights)

    @classmethod
    def from_density(cls, domain, density_fn, space: ParameterSpace | None = None,
                     quad_per_axis: int = 1024, trim_rule=None, pre_normalized: bool = False):
        dom = np.asarray(domain, dtype=float)
        dom = dom.reshape(-1, 2)
        if space is None:
            space = ParameterSpace(dom.shape[0], bounds=dom if np.all(np.isfinite(dom)) else None)
        return cls(space, "density", domain=dom, density_fn=density_fn,
                   quad_per_axis=quad_per_axis, trim_rule=trim_rule,
                   _pre_normalized=pre_normalized)

    @classmethod
    def uniform(cls, domain, quad_per_axis: int = 1024):
        dom = np.asarray(domain, dtype=float).reshape(-1, 2)
        if not np.all(np.isfinite(dom)):
            raise ValueError("uniform measure requires a bounded box")
        vol = float(np.prod(dom[:, 1] - dom[:, 0]))

        def dens(pts):
            return np.full(len(pts), 1.0 / vol)

        return cls.from_density(dom, dens, quad_per_axis=quad_per_axis, pre_normalized=True)

    @classmethod
    def mixture(cls, atom_points, atom_weights, domain, density_fn,
                density_mass: float, space: ParameterSpace | None = None,
                quad_per_axis: int = 1024):
        pts = np.atleast_2d(np.asarray(atom_points, dtype=float))
        if space is None:
            space = ParameterSpace(pts.shape[1])
        return cls(space, "mixture", atom_points=pts, atom_weights=atom_weights,
                   domain=domain, density_fn=density_fn, density_mass=density_mass,
                   quad_per_axis=quad_per_axis)

    # -- density plumbing ------------------------------------------------------
    @staticmethod
    def _wrap_density(fn):
        def vectorized(pts):
            pts = np.atleast_2d(np.asarray(pts, dtype=float))
            try:
                vals = np.asarray(fn(pts), dtype=float)
                if vals.shape == (len(pts),):
                    return vals
            except Exception:
                pass
            return np.array([float(fn(p)) for p in pts])

        return vectorized

    def _bounded_domain(self) -> bool:
        return self.domain is not None and bool(np.all(np.isfinite(self.domain)))

    def _quad_grid(self, box: np.ndarray, cells_per_axis: np.ndarray):
        """Tensor midpoint grid aligned with the given per-axis cell counts.

        Returns (nodes (N, d), node_volume, per-axis node arrays, per-cell node count).
        """
        d = self.space.dimension
        axis_nodes = []
        per_cell = []
        vol = 1.0
        for k in range(d):
            n_cells = int(cells_per_axis[k])
            m = max(1, math.ceil(self.quad_per_axis / n_cells))
            nodes, step = _midpoint_axis_nodes(box[k, 0], box[k, 1], n_cells, m)
            axis_nodes.append(nodes)
            per_cell.append(m)
            vol *= step
        mesh = np.meshgrid(*axis_nodes, indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh], axis=-1)
        return nodes, vol, axis_nodes, np.asarray(per_cell)

    def _raw_domain_mass(self) -> float:
        nodes, vol, _, _ = self._quad_grid(self.domain, np.ones(self.space.dimension, dtype=int))
        return float(np.sum(self.density_fn(nodes)) * vol)

    def density_values(self, pts: np.ndarray) -> np.ndarray:
        return self._norm * self.density_fn(pts)

    def density_cell_masses(self, box: np.ndarray, cells_per_axis: np.ndarray):
        """Masses of the uniform-cell partition of ``box``, plus cell centers.

        The result is ordered lexicographically by cell multi-index, which is
        the fixed atom ordering every summation downstream relies on.
        Adjacent cells share the exact same edge floats, so disjointness
        checks see no spurious slivers.
        """
        nodes, vol, _, per_cell = self._quad_grid(box, cells_per_axis)
        vals = self.density_values(nodes) * vol
        d = self.space.dimension
        shape = []
        for k in range(d):
            shape.extend([int(cells_per_axis[k]), int(per_cell[k])])
        vals = vals.reshape(shape)
        # sum out the intra-cell node axes (odd positions)
        vals = vals.transpose(*range(0, 2 * d, 2), *range(1, 2 * d, 2))
        masses = vals.reshape(int(np.prod(cells_per_axis)), -1).sum(axis=1)

        axis_edges = []
        for k in range(d):
            edges = np.linspace(box[k, 0], box[k, 1], int(cells_per_axis[k]) + 1)
            axis_edges.append(edges)
        idx = np.stack(np.meshgrid(*[np.arange(int(c)) for c in cells_per_axis],
                                   indexing="ij"), axis=-1).reshape(-1, d)
        lows = np.stack([axis_edges[k][idx[:, k]] for k in range(d)], axis=-1)
        highs = np.stack([axis_edges[k][idx[:, k] + 1] for k in range(d)], axis=-1)
        centers = 0.5 * (lows + highs)
        return masses, centers, lows, highs

    def density_mean(self, box: np.ndarray) -> np.ndarray:
        nodes, vol, _, _ = self._quad_grid(box, np.ones(self.space.dimension, dtype=int))
        w = self.density_values(nodes) * vol
        total = w.sum()
        if total <= 0:
            return box.mean(axis=1)
        return (nodes * w[:, None]).sum(axis=0) / total

    # -- integration -----------------------------------------------------------
    def total_mass(self) -> float:
        """Quadrature-evaluated total mass (for invariant checking)."""
        total = float(self.atom_weights.sum())
        if self.density_fn is not None and self._bounded_domain():
            nodes, vol, _, _ = self._quad_grid(self.domain, np.ones(self.space.dimension, dtype=int))
            total += float(np.sum(self.density_values(nodes)) * vol) * self.density_mass
        elif self.density_fn is not None:
            total += self.density_mass
        return total

    def integrate(self, h: Callable) -> float:
        total = 0.0
        for p, w in zip(self.atom_points, self.atom_weights):
            total += w * float(h(p))
        if self.density_fn is not None:
            if not self._bounded_domain():
                raise ValueError("cannot integrate a density with unbounded support")
            nodes, vol, _, _ = self._quad_grid(self.domain, np.ones(self.space.dimension, dtype=int))
            hv = _eval_test_function(h, nodes)
            total += self.density_mass * float(np.sum(hv * self.density_values(nodes)) * vol)
        return total


def _eval_test_function(h: Callable, nodes: np.ndarray) -> np.ndarray:
    try:
        vals = np.asarray(h(nodes), dtype=float)
        if vals.shape == (len(nodes),):
            return vals
    except Exception:
        pass
    return np.array([float(h(p)) for p in nodes])


@dataclass
class FiniteSupportMeasure:
    """Convex combination of point masses produced by ``discretize``.

    ``parent_cells`` records the box each atom's mass was lumped from; it is
    omitted when a cell had to be shared between several inherited atoms.
    ``residual_mass`` is the mass trimmed outside the compact support box and
    carried by a single designated atom.
    """

    space: ParameterSpace
    atoms: np.ndarray          # (N, d)
    weights: np.ndarray        # (N,)
    level: int
    parent_cells: np.ndarray | None = None  # (N, d, 2)
    residual_mass: float = 0.0

    def __post_init__(self):
        self.atoms = _as_points(self.atoms, self.space.dimension)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.atoms):
            raise ValueError("one weight per atom required")
        if np.any(self.weights <= 0) or np.any(self.weights > 1 + _MASS_TOL):
            raise ValueError("weights must lie in (0, 1]")
        if abs(self.weights.sum() - 1.0) > _MASS_TOL:
            raise ValueError(f"weights must sum to 1, got {self.weights.sum()}")
        if self.parent_cells is not None:
            cells = np.asarray(self.parent_cells, dtype=float)
            if cells.shape != (len(self.atoms), self.space.dimension, 2):
                raise ValueError("parent_cells must have shape (N, d, 2)")
            inside = (self.atoms >= cells[:, :, 0] - 1e-12) & (self.atoms <= cells[:, :, 1] + 1e-12)
            if not np.all(inside):
                raise ValueError("each atom must lie in its parent cell")
            lo, hi = cells[:, :, 0], cells[:, :, 1]
            overlap = np.all((lo[:, None] < hi[None, :]) & (lo[None, :] < hi[:, None]), axis=-1)
            np.fill_diagonal(overlap, False)
            if np.any(overlap):
                raise ValueError("parent cells must be pairwise disjoint")
            self.parent_cells = cells

    def __len__(self) -> int:
        return len(self.atoms)

    def integrate(self, h: Callable) -> float:
        """Exact weighted sum over atoms, in fixed atom-index order."""
        total = 0.0
        for p, w in zip(self.atoms, self.weights):
            total += w * float(h(p))
        return total


def _merge_duplicate_atoms(points, weights, cells):
    """Merge exactly-coincident atoms, keeping first-appearance order."""
    merged_pts, merged_w, merged_cells = [], [], []
    index = {}
    for i, (p, w) in enumerate(zip(points, weights)):
        key = tuple(p)
        if key in index:
            j = index[key]
            merged_w[j] += w
            merged_cells[j] = None
        else:
            index[key] = len(merged_pts)
            merged_pts.append(p)
            merged_w.append(w)
            merged_cells.append(None if cells is None else cells[i])
    return merged_pts, merged_w, merged_cells


def discretize(mu: ProbabilityMeasure, level: int, *,
               reuse_atoms: np.ndarray | None = None) -> FiniteSupportMeasure:
    """Finite-support approximation of ``mu`` at the given level.

    The density part of ``mu`` is partitioned into axis-aligned cells of
    diameter <= 1/level; each cell contributes one atom (the cell center, or
    an inherited atom from ``reuse_atoms`` when one lies in the cell, so that
    atom sets nest across levels).  Cell weights are the quadrature masses,
    empty cells are dropped, and atoms of the atomic part are always kept.
    For an unbounded domain, a trimming rule must supply a compact box
    holding all but < 1/level of the mass; the trimmed remainder is lumped
    into one atom at the density's mean point.
    """
    level = int(level)
    if level < 1:
        raise ValueError("level must be >= 1")
    d = mu.space.dimension

    points: list[np.ndarray] = []
    weights: list[float] = []
    cells: list[np.ndarray | None] = []
    residual_mass = 0.0
    any_split = False

    # atomic part is preserved verbatim (degenerate point cells)
    for p, w in zip(mu.atom_points, mu.atom_weights):
        points.append(np.array(p, dtype=float))
        weights.append(float(w))
        cells.append(np.stack([p, p], axis=-1))

    if mu.density_fn is not None:
        if mu._bounded_domain():
            box = mu.domain
            trimmed = 0.0
        else:
            if mu.trim_rule is None:
                raise ValueError(
                    "cannot construct K_l: density support is unbounded and no "
                    "quantile-trimming rule is configured")
            box = np.asarray(mu.trim_rule(level), dtype=float).reshape(d, 2)
            if not np.all(np.isfinite(box)):
                raise ValueError("cannot construct K_l: trimming rule returned an unbounded box")

        side = 1.0 / (level * math.sqrt(d))  # cell diameter <= 1/level
        lengths = box[:, 1] - box[:, 0]
        n_cells = np.maximum(1, np.ceil(lengths / side - 1e-12)).astype(int)
        masses, centers, lows, highs = mu.density_cell_masses(box, n_cells)

        if not mu._bounded_domain():
            inside = float(masses.sum())
            trimmed = max(0.0, 1.0 - inside)
            if trimmed >= 1.0 / level:
                raise ValueError(
                    f"cannot construct K_l: trimming rule leaves mass {trimmed:.3g} "
                    f"outside the box (needs < {1.0 / level:.3g})")

        scale = mu.density_mass if mu.kind == "mixture" else 1.0
        inside_total = float(masses.sum())
        if inside_total <= 0:
            raise ValueError("density has no mass on the partition box")
        # renormalize cell masses so the density part carries exactly its share
        density_share = scale * (1.0 if mu._bounded_domain() else inside_total)
        masses = masses * (density_share / inside_total)

        reuse = None
        if reuse_atoms is not None and len(reuse_atoms) > 0:
            reuse = _as_points(reuse_atoms, d)

        for j in range(len(masses)):
            if masses[j] <= 0.0:
                continue
            cell_box = np.stack([lows[j], highs[j]], axis=-1)
            inherited = []
            if reuse is not None:
                hi_edge = np.isclose(highs[j], box[:, 1])
                upper_ok = (reuse < highs[j][None, :]) | (hi_edge[None, :] & (reuse <= highs[j][None, :]))
                member = np.all((reuse >= lows[j][None, :]) & upper_ok, axis=1)
                inherited = [reuse[i] for i in np.flatnonzero(member)]
            if len(inherited) <= 1:
                rep = inherited[0] if inherited else centers[j]
                points.append(np.array(rep, dtype=float))
                weights.append(float(masses[j]))
                cells.append(cell_box)
            else:
                # several inherited atoms share the cell: split its mass by
                # nearest-atom regions so every inherited atom survives
                any_split = True
                sub_masses, sub_centers, _, _ = mu.density_cell_masses(
                    cell_box, np.full(d, 4, dtype=int))
                sub_masses = sub_masses * (masses[j] / max(sub_masses.sum(), 1e-300))
                anchors = np.stack(inherited)
                owner = np.argmin(
                    np.linalg.norm(sub_centers[:, None, :] - anchors[None, :, :], axis=-1), axis=1)
                for a in range(len(anchors)):
                    w = float(sub_masses[owner == a].sum())
                    if w > 0:
                        points.append(np.array(anchors[a], dtype=float))
                        weights.append(w)
                        cells.append(None)

        if trimmed > 0:
            points.append(mu.density_mean(box))
            weights.append(scale * trimmed)
            cells.append(None)
            residual_mass = scale * trimmed
            any_split = True

    points, weights, cells = _merge_duplicate_atoms(points, weights, cells)
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.sum()
    # mixtures get no box cells: a point atom inside a density cell is
    # measure-disjoint from it, but boxes cannot express the exclusion
    parent = None
    if mu.kind != "mixture" and not any_split and all(c is not None for c in cells):
        parent = np.stack(cells)
    return FiniteSupportMeasure(mu.space, np.stack(points), weights, level,
                                parent_cells=parent, residual_mass=residual_mass)


@dataclass
class DiracApproximationSequence:
    """Nested finite-support approximations plus the union of their atoms."""

    levels: list[FiniteSupportMeasure]
    union_support: np.ndarray

    def __post_init__(self):
        for a, b in zip(self.levels, self.levels[1:]):
            fine = {tuple(p) for p in b.atoms}
            for p in a.atoms:
                if tuple(p) not in fine:
                    raise ValueError("atom sets must be nested across levels")
        seen = set()
        for p in self.union_support:
            key = tuple(p)
            if key in seen:
                raise ValueError("union support must not contain duplicates")
            seen.add(key)


def build_sequence(mu: ProbabilityMeasure, levels: Sequence[int]) -> DiracApproximationSequence:
    """Discretize ``mu`` at each level, reusing earlier atoms so sets nest."""
    levels = sorted(int(l) for l in levels)
    out: list[FiniteSupportMeasure] = []
    union: list[np.ndarray] = []
    seen: set[tuple] = set()
    accumulated: np.ndarray | None = None
    for lvl in levels:
        m = discretize(mu, lvl, reuse_atoms=accumulated)
        out.append(m)
        for p in m.atoms:
            key = tuple(p)
            if key not in seen:
                seen.add(key)
                union.append(np.array(p))
        accumulated = np.stack(union)
    return DiracApproximationSequence(out, np.stack(union))


def integrate(mu, h: Callable) -> float:
    """Integral of ``h`` against an exact or finite-support measure."""
    return mu.integrate(h)


def weak_star_gap(mu: ProbabilityMeasure, mu_l: FiniteSupportMeasure,
                  tests: Sequence[tuple]) -> list[float]:
    """Per test function ``(h, lipschitz, sup_bound)``, the integration gap
    ``|∫h dmu_l - ∫h dmu|`` between the approximation and the measure."""
    gaps = []
    for h, _lip, _sup in tests:
        gaps.append(abs(mu_l.integrate(h) - mu.integrate(h)))
    return gaps


def weak_star_bound(level: int, lipschitz: float, sup_bound: float,
                    residual_mass: float | None = None) -> float:
    """Guaranteed gap bound for an L-Lipschitz test function with |h| <= M:
    cell diameters contribute L/level, trimmed mass contributes 2M times the
    trimmed amount (at most 1/level)."""
    trimmed = 1.0 / level if residual_mass is None else residual_mass
    return lipschitz / level + 2.0 * sup_bound * trimmed
