"""Matplotlib renderings of traces, eval reports, and training metrics.

Everything renders through the Agg backend straight to files; nothing here
opens a window. Each CLI report path calls one of these to drop a .png next
to the machine-readable artifact.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .runtime import EpisodeTrace, EvalReport

_SUBGOAL_CMAP = "viridis"


def _draw_scene(ax, meta: dict) -> None:
    state = meta.get("initial_state") or {}
    for name, rect in sorted((state.get("regions") or {}).items()):
        cx, cy = rect["center"]
        hx, hy = rect["half"]
        ax.add_patch(plt.Rectangle((cx - hx, cy - hy), 2 * hx, 2 * hy,
                                   fill=False, edgecolor="tab:gray",
                                   linestyle="--", linewidth=1.2))
        ax.annotate(name, (cx, cy + hy), ha="center", va="bottom",
                    fontsize=8, color="tab:gray")
    for name, obj in sorted((state.get("objects") or {}).items()):
        ax.add_patch(plt.Circle(tuple(obj["center"]), obj["radius"],
                                fill=False, edgecolor="tab:brown", linewidth=1.2))
        ax.annotate(name, tuple(obj["center"]), ha="center", va="center",
                    fontsize=7, color="tab:brown")


def save_trace_figure(trace: EpisodeTrace, path) -> str:
    """Two panels: the gripper path by subgoal, and the p curve over time."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    subgoals = trace.meta["subgoals"]
    n_subgoals = max(1, len(subgoals))
    cmap = plt.get_cmap(_SUBGOAL_CMAP, n_subgoals)

    fig, (ax_map, ax_p) = plt.subplots(
        1, 2, figsize=(11, 4.6), gridspec_kw={"width_ratios": [1, 1.4]})

    start = (trace.meta.get("initial_state") or {}).get("gripper")
    xs = ([start[0]] if start else []) + [r["gripper_xy"][0] for r in trace.steps]
    ys = ([start[1]] if start else []) + [r["gripper_xy"][1] for r in trace.steps]
    indices = [r["subgoal_index"] for r in trace.steps]
    for i in range(len(trace.steps)):
        ax_map.plot(xs[i:i + 2], ys[i:i + 2], color=cmap(indices[i]), linewidth=1.6)
    if xs:
        ax_map.plot(xs[0], ys[0], "o", color="black", markersize=5)
        ax_map.plot(xs[-1], ys[-1], "s", color="tab:red", markersize=5)
    _draw_scene(ax_map, trace.meta)
    ax_map.set_xlim(-0.02, 1.02)
    ax_map.set_ylim(-0.02, 1.02)
    ax_map.set_aspect("equal")
    ax_map.set_title(f"{trace.meta['task']} seed {trace.meta['env_seed']}")

    ts = [r["t"] for r in trace.steps]
    ps = [r["p"] for r in trace.steps]
    if any(p is not None for p in ps):
        ax_p.plot(ts, [np.nan if p is None else p for p in ps],
                  color="tab:blue", linewidth=1.2, label="p")
        tau = trace.meta["config"]["tau"]
        ax_p.axhline(tau, color="tab:red", linestyle=":", linewidth=1.0,
                     label=f"tau={tau}")
    for i, r in enumerate(trace.steps):
        if r["advanced"]:
            ax_p.axvline(r["t"], color=cmap(r["subgoal_index"]), alpha=0.6,
                         linewidth=1.0)
    band = np.array(indices, dtype=float)
    ax_p.step(ts, band / max(1, n_subgoals - 1) if n_subgoals > 1 else band,
              where="post", color="tab:gray", alpha=0.5, linewidth=1.0,
              label="subgoal index (scaled)")
    outcome = "success" if trace.terminal["success"] else (
        "stall" if trace.terminal["stall"] else "failure")
    ax_p.set_title(f"completion score, outcome: {outcome}")
    ax_p.set_xlabel("environment step")
    ax_p.set_ylim(-0.05, 1.05)
    ax_p.legend(loc="upper right", fontsize=8)

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_eval_figure(report: EvalReport, path) -> str:
    """Episode outcomes and the per-subgoal failure histogram."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_ep, ax_hist) = plt.subplots(1, 2, figsize=(11, 4.0),
                                         gridspec_kw={"width_ratios": [1.5, 1]})
    steps = [r["steps"] for r in report.rows]
    colors = ["tab:green" if r["success"] else
              ("tab:orange" if r["stall"] else "tab:red") for r in report.rows]
    ax_ep.bar(range(len(report.rows)), steps, color=colors)
    ax_ep.set_xlabel("episode")
    ax_ep.set_ylabel("steps")
    ax_ep.set_title(f"{report.task}: success rate "
                    f"{report.n_success}/{report.n_episodes} "
                    f"({100.0 * report.success_rate:.1f}%)")

    if report.failure_histogram:
        keys = sorted(report.failure_histogram, key=int)
        ax_hist.bar([str(k) for k in keys],
                    [report.failure_histogram[k] for k in keys],
                    color="tab:red")
        ax_hist.set_title("active subgoal at failure")
        ax_hist.set_xlabel("subgoal index")
    else:
        ax_hist.text(0.5, 0.5, "no failures", ha="center", va="center")
        ax_hist.set_axis_off()

    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_metrics_figure(history: list, path) -> str:
    """Loss curves with the lambda ramp on a twin axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(8, 4.2))
    epochs = [row["epoch"] for row in history]
    for key, color in (("l_total", "tab:blue"), ("l_action", "tab:green"),
                       ("l_completion", "tab:purple")):
        ax.plot(epochs, [row[key] for row in history], color=color,
                linewidth=1.3, label=key)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    twin = ax.twinx()
    twin.plot(epochs, [row["lambda"] for row in history], color="tab:red",
              linestyle="--", linewidth=1.0)
    twin.set_ylabel("lambda", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
