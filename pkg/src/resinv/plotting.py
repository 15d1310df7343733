"""Static figures written next to the CSV/JSON outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluator import TransferFunction  # noqa: E402
from .geometry import CircuitDesign  # noqa: E402

# slit marker direction per slit_dir (up, left, down, right)
_SLIT_NORMALS = ((0, 1), (-1, 0), (0, -1), (1, 0))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(rows, path) -> None:
    it = [r["iteration"] for r in rows]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(it, [r["mean_reward"] for r in rows], lw=0.8, alpha=0.6, label="batch mean")
    ax.plot(it, [r["running_reward"] for r in rows], lw=1.5, label="running reward")
    ax.plot(it, [r["best_reward"] for r in rows], lw=1.5, ls="--", label="best")
    ax.set_xlabel("iteration")
    ax.set_ylabel("reward (-dB error)")
    twin = ax.twinx()
    twin.plot(it, [r["beta_e"] for r in rows], color="0.5", lw=0.8)
    twin.set_ylabel("entropy weight", color="0.5")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_response(path, target: TransferFunction | None = None,
                  candidate: TransferFunction | None = None, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if target is not None:
        ax.plot(target.freqs / 1e9, target.mag_db, color="tab:red", lw=1.5, label="target")
    if candidate is not None:
        ax.plot(candidate.freqs / 1e9, candidate.mag_db, color="tab:blue", lw=1.2,
                ls="--", label="design")
    ax.set_xlabel("frequency (GHz)")
    ax.set_ylabel("|S21| (dB)")
    if title:
        ax.set_title(title, fontsize=10)
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_layout(design: CircuitDesign, path) -> None:
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    if design.boundary is not None:
        for (x0, x1), (y0, y1), color in ((*design.boundary.outer, "tab:orange"),
                                          (*design.boundary.center_region, "0.7")):
            ax.add_patch(Rectangle((x0, y0), x1 - x0, y1 - y0, fill=True, alpha=0.15,
                                   color=color, lw=0))
    for k, r in enumerate(design.resonators):
        a = r.side
        x, y = r.center
        ax.add_patch(Rectangle((x - a / 2, y - a / 2), a, a, fill=False, lw=1.5))
        nx, ny = _SLIT_NORMALS[r.slit_dir]
        # slit sits on the chosen edge, shifted along it by the offset
        sx = x + nx * a / 2 + ny * r.slit_offset * a
        sy = y + ny * a / 2 - nx * r.slit_offset * a
        ax.plot([sx], [sy], marker="o", color="tab:red", ms=4)
        ax.annotate(str(k + 1), (x, y), ha="center", va="center", fontsize=9)
    ax.set_aspect("equal")
    ax.autoscale_view()
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    _save(fig, path)
