"""Diagnostic figures for a survey run.

Three PNGs: the prior-versus-optimized trajectory overlay, the view-graph
connectivity map, and the per-image pose-graph constraint histogram with
weak pairs called out.  All rendering uses the Agg backend so the functions
work headless.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .geometry import Pose, inverse
from .viewgraph import ViewGraph
from .weak_area import WeakReport

__all__ = [
    "save_connectivity",
    "save_trajectory_overlay",
    "save_weak_pair_report",
]


def _centers(poses: dict[int, Pose]) -> tuple[list[int], np.ndarray]:
    imgs = sorted(poses)
    return imgs, np.array([inverse(poses[i]).t for i in imgs])


def save_trajectory_overlay(
    prior_poses: dict[int, Pose],
    final_poses: dict[int, Pose],
    path,
    truth_poses: dict[int, Pose] | None = None,
) -> None:
    """Top-down (east-north) camera-center tracks, priors vs optimized."""
    fig, ax = plt.subplots(figsize=(7.0, 6.0))
    imgs_p, prior = _centers(prior_poses)
    ax.plot(prior[:, 0], prior[:, 1], "--", color="0.55", lw=1.0, label="navigation prior")
    ax.plot(prior[:, 0], prior[:, 1], ".", color="0.55", ms=3)
    imgs_f, final = _centers(final_poses)
    ax.plot(final[:, 0], final[:, 1], "-", color="tab:blue", lw=1.2, label="optimized")
    ax.plot(final[:, 0], final[:, 1], ".", color="tab:blue", ms=3)
    if truth_poses is not None:
        _, truth = _centers(truth_poses)
        ax.plot(truth[:, 0], truth[:, 1], "-", color="tab:green", lw=0.8, label="truth")
    # tie each optimized camera to its prior so systematic drift is visible
    common = sorted(set(imgs_p) & set(imgs_f))
    by_img_p = {i: c for i, c in zip(imgs_p, prior)}
    by_img_f = {i: c for i, c in zip(imgs_f, final)}
    for img in common:
        a, b = by_img_p[img], by_img_f[img]
        ax.plot([a[0], b[0]], [a[1], b[1]], "-", color="tab:red", lw=0.5, alpha=0.5)
    ax.set_xlabel("east (m)")
    ax.set_ylabel("north (m)")
    ax.set_aspect("equal")
    ax.legend(loc="best", fontsize=8)
    ax.set_title("camera trajectory: prior vs optimized")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_connectivity(graph: ViewGraph, positions: dict[int, Pose], path) -> None:
    """View-graph edges drawn between camera positions, heavier and darker
    with more verified matches."""
    fig, ax = plt.subplots(figsize=(7.0, 6.0))
    imgs, centers = _centers(positions)
    by_img = {i: c for i, c in zip(imgs, centers)}
    if graph.edges:
        top = max(edge.n_matches for edge in graph.edges.values())
    else:
        top = 1
    for (a, b), edge in sorted(graph.edges.items()):
        if a not in by_img or b not in by_img:
            continue
        w = edge.n_matches / top
        ax.plot(
            [by_img[a][0], by_img[b][0]],
            [by_img[a][1], by_img[b][1]],
            "-",
            color=plt.cm.viridis(0.2 + 0.8 * w),
            lw=0.4 + 2.0 * w,
            alpha=0.35 + 0.6 * w,
        )
    ax.plot(centers[:, 0], centers[:, 1], "o", color="black", ms=3, zorder=3)
    ax.set_xlabel("east (m)")
    ax.set_ylabel("north (m)")
    ax.set_aspect("equal")
    ax.set_title(f"view graph: {len(graph.edges)} verified pairs")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_weak_pair_report(report: WeakReport, path) -> None:
    """Histogram of pose-graph constraints per image, with the weak-pair
    and unregistered counts in the title."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    counts = [report.constraint_histogram[i] for i in sorted(report.constraint_histogram)]
    if counts:
        bins = np.arange(-0.5, max(counts) + 1.5, 1.0)
        ax.hist(counts, bins=bins, color="tab:blue", edgecolor="white")
    ax.set_xlabel("metric pairwise constraints per image")
    ax.set_ylabel("images")
    ax.set_title(
        f"{len(report.weak_pairs)} weak pairs, "
        f"{len(report.unregistered)} unregistered images"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
