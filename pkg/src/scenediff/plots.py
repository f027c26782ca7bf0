"""Figure rendering and mesh export for reports.

Everything draws through the non-interactive backend and writes straight
to files, so these helpers are safe in headless runs and never pop
windows.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .scene import Scene

__all__ = [
    "reward_curve_png",
    "loss_curve_png",
    "count_histogram_png",
    "category_histogram_png",
    "scene_png",
    "export_obj",
]

_LOSS_PART_KEYS = ("mse_translation", "mse_rotation", "discrete_vb", "cross_entropy", "mse_category")


def reward_curve_png(rewards, best_rewards, path: str, xlabel: str = "sample") -> None:
    """Per-sample rewards with the running best overlaid."""
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(1, len(rewards) + 1)
    ax.plot(x, rewards, lw=0.8, alpha=0.6, label="reward")
    ax.plot(x, best_rewards, lw=1.8, label="best so far")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("reward")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_png(metrics_rows, path: str) -> None:
    """Training curves from logged metric rows (dicts with ``step``)."""
    rows = [r for r in metrics_rows if "step" in r]
    if not rows:
        raise ValueError("no metric rows to plot")
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    if "total" in rows[0]:
        ax.plot(steps, [r["total"] for r in rows], lw=1.6, label="total")
    for key in _LOSS_PART_KEYS:
        if key in rows[0] and rows[0][key] is not None:
            ax.plot(steps, [r[key] for r in rows], lw=0.9, alpha=0.7, label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def count_histogram_png(count_sets: dict, path: str) -> None:
    """Object-count histograms for one or more labelled scene populations."""
    if not count_sets:
        raise ValueError("no populations to plot")
    top = max((max(v) if len(v) else 0) for v in count_sets.values())
    bins = np.arange(top + 2)
    width = 0.8 / len(count_sets)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (label, counts) in enumerate(count_sets.items()):
        hist = np.bincount(np.asarray(counts, dtype=int), minlength=top + 1)
        freq = hist / max(1, len(counts))
        ax.bar(bins[:-1] + i * width, freq, width=width, label=label, align="edge")
    ax.set_xlabel("objects per scene")
    ax.set_ylabel("fraction of scenes")
    ax.set_xticks(bins[:-1])
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def category_histogram_png(scene_sets: dict, library, path: str) -> None:
    """Category-usage frequencies for labelled scene populations."""
    from .metrics import category_histogram

    if not scene_sets:
        raise ValueError("no populations to plot")
    k = library.num_categories
    names = [library.name_of(c) for c in range(1, k)]
    width = 0.8 / len(scene_sets)
    x = np.arange(k - 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, (label, scenes) in enumerate(scene_sets.items()):
        hist = category_histogram(scenes, k).astype(float)
        freq = hist / max(1.0, hist.sum())
        ax.bar(x + i * width, freq, width=width, label=label, align="edge")
    ax.set_xticks(x + 0.4)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("fraction of objects")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _world_spheres(scene: Scene):
    """Yield (center (3,), radius, category, welded) for every sphere."""
    for slot in scene.slots:
        if slot.is_empty:
            continue
        asset = scene.library.asset_for(slot.category)
        r = slot.rotation.as_matrix()
        for k in range(asset.spheres.shape[0]):
            center = slot.translation + r @ asset.spheres[k, :3]
            yield center, float(asset.spheres[k, 3]), slot.category, slot.welded


def scene_png(scene: Scene, path: str, half_extent: float = 0.6, z_max: float = 1.0) -> None:
    """Top and front orthographic views of the collision spheres."""
    fig, (ax_top, ax_front) = plt.subplots(1, 2, figsize=(11, 5))
    cmap = plt.get_cmap("tab10")
    seen = {}
    for center, radius, category, welded in _world_spheres(scene):
        color = "0.6" if welded else cmap((category - 1) % 10)
        label = None
        name = scene.library.name_of(category)
        if name not in seen:
            seen[name] = True
            label = name
        ax_top.add_patch(plt.Circle((center[0], center[1]), radius, fill=False, color=color, label=label))
        ax_front.add_patch(plt.Circle((center[0], center[2]), radius, fill=False, color=color))
    for ax, ylabel, ylim in ((ax_top, "y (m)", (-half_extent, half_extent)), (ax_front, "z (m)", (0.0, z_max))):
        ax.set_xlim(-half_extent, half_extent)
        ax.set_ylim(*ylim)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
    ax_top.set_title("top view")
    ax_front.set_title("front view")
    if seen:
        ax_top.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Wavefront OBJ export
# ---------------------------------------------------------------------------


def _unit_sphere_mesh(n_theta: int = 12, n_phi: int = 16):
    """Latitude/longitude triangulation of the unit sphere."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_theta):
        theta = np.pi * i / n_theta
        for j in range(n_phi):
            phi = 2 * np.pi * j / n_phi
            verts.append(
                (np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta))
            )
    verts.append((0.0, 0.0, -1.0))
    faces = []
    for j in range(n_phi):
        faces.append((0, 1 + j, 1 + (j + 1) % n_phi))
    for i in range(n_theta - 2):
        ring, nxt = 1 + i * n_phi, 1 + (i + 1) * n_phi
        for j in range(n_phi):
            a, b = ring + j, ring + (j + 1) % n_phi
            c, d = nxt + j, nxt + (j + 1) % n_phi
            faces.append((a, c, d))
            faces.append((a, d, b))
    south = len(verts) - 1
    base = 1 + (n_theta - 2) * n_phi
    for j in range(n_phi):
        faces.append((south, base + (j + 1) % n_phi, base + j))
    return np.asarray(verts), faces


def export_obj(scene: Scene, path: str, n_theta: int = 12, n_phi: int = 16) -> int:
    """Write the scene's collision spheres as a Wavefront OBJ mesh.

    Each sphere becomes one ``o`` group of a scaled unit sphere.  Returns
    the number of spheres written.
    """
    unit_verts, unit_faces = _unit_sphere_mesh(n_theta, n_phi)
    written = 0
    offset = 0
    with open(path, "w", encoding="utf-8") as f:
        f.write("# collision-sphere export\n")
        for center, radius, category, welded in _world_spheres(scene):
            name = scene.library.name_of(category)
            f.write(f"o {name}_{written}\n")
            pts = unit_verts * radius + center
            for p in pts:
                f.write(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
            for a, b, c in unit_faces:
                f.write(f"f {a + 1 + offset} {b + 1 + offset} {c + 1 + offset}\n")
            offset += len(pts)
            written += 1
    return written
