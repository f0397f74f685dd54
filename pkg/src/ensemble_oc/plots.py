"""Figure rendering for solve/benchmark output directories.

Every figure is written next to the delimited data it visualizes, using the
Agg backend so rendering works headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_control",
    "render_trajectories",
    "render_hamiltonian_profile",
    "render_cost_vs_level",
    "render_weakstar_gaps",
]


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_control(out_dir, nodes: np.ndarray, values: np.ndarray) -> Path:
    path = Path(out_dir) / "control.png"
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for i in range(values.shape[1]):
        ax.step(nodes[:-1], values[:, i], where="post", label=f"u_{i + 1}")
    ax.set_xlabel("t")
    ax.set_ylabel("control")
    if values.shape[1] > 1:
        ax.legend(fontsize=8)
    ax.set_title("recovered control")
    _save(fig, path)
    return path


def render_trajectories(out_dir, nodes: np.ndarray, states: np.ndarray,
                        costates: np.ndarray | None = None) -> Path:
    path = Path(out_dir) / "trajectories.png"
    n_panels = 1 if costates is None else 2
    fig, axes = plt.subplots(1, n_panels, figsize=(6 * n_panels, 3.2), squeeze=False)
    ax = axes[0, 0]
    for j in range(states.shape[0]):
        ax.plot(nodes, states[j, :, 0], lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("x_1")
    ax.set_title("trajectory ensemble (first coordinate)")
    if costates is not None:
        ax = axes[0, 1]
        for j in range(costates.shape[0]):
            ax.plot(nodes, costates[j, :, 0], lw=1.0)
        ax.set_xlabel("t")
        ax.set_ylabel("p_1")
        ax.set_title("costate ensemble (first coordinate)")
    _save(fig, path)
    return path


def render_hamiltonian_profile(out_dir, nodes: np.ndarray, h_control: np.ndarray,
                               h_max: np.ndarray) -> Path:
    path = Path(out_dir) / "hamiltonian_profile.png"
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(nodes, h_max, lw=1.2, label="max over controls")
    ax.plot(nodes, h_control, lw=1.0, ls="--", label="at candidate control")
    ax.set_xlabel("t")
    ax.set_ylabel("averaged Hamiltonian")
    ax.legend(fontsize=8)
    ax.set_title("pointwise maximality profile")
    _save(fig, path)
    return path


def render_cost_vs_level(out_dir, levels, costs) -> Path:
    path = Path(out_dir) / "cost_vs_level.png"
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(levels, costs, marker="o")
    ax.set_xlabel("discretization level")
    ax.set_ylabel("average cost")
    ax.set_title("cost across refinement levels")
    _save(fig, path)
    return path


def render_weakstar_gaps(out_dir, rows) -> Path:
    """rows: iterable of (level, test_id, gap, bound)."""
    path = Path(out_dir) / "weakstar_gaps.png"
    by_test: dict[str, list[tuple[int, float]]] = {}
    for level, test_id, gap, _bound in rows:
        by_test.setdefault(test_id, []).append((level, gap))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for test_id, pts in sorted(by_test.items()):
        pts = sorted(pts)
        ax.plot([p[0] for p in pts], [max(p[1], 1e-18) for p in pts],
                marker="o", label=test_id)
    ax.set_xlabel("level")
    ax.set_ylabel("integration gap")
    ax.set_yscale("log")
    ax.legend(fontsize=7)
    ax.set_title("weak-star diagnostics")
    _save(fig, path)
    return path
