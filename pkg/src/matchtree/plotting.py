"""Figures written next to the delimited reports: matched counts and effect forests."""

from __future__ import annotations

import math
from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib import pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 10,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    "svg.hashsalt": "matchtree",
}


@contextmanager
def house_style():
    with plt.rc_context(RC):
        yield


def _save(fig, path: Path) -> Path:
    # no timestamp or version metadata, so reruns write identical bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def counts_figure(counts: list[dict], path: str | Path) -> Path:
    """Exposed (E) and control (C) counts before and after matching, one group per node."""
    path = Path(path)
    with house_style():
        fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(counts) + 1), 3.2))
        width = 0.2
        keys = [("exposed_before", "E before", "#9ecae1"), ("exposed_after", "E after", "#3182bd"),
                ("control_before", "C before", "#fdae6b"), ("control_after", "C after", "#e6550d")]
        for k, (key, label, color) in enumerate(keys):
            xs = [i + (k - 1.5) * width for i in range(len(counts))]
            ax.bar(xs, [c.get(key, 0) for c in counts], width, label=label, color=color)
        ax.set_xticks(range(len(counts)))
        ax.set_xticklabels([c["node"].replace("_", "\n") for c in counts])
        ax.set_ylabel("subjects")
        ax.set_title("Available units before and after matching")
        ax.legend(ncol=4, loc="upper right", fontsize=7)
        return _save(fig, path)


def forest_figure(rows: list[dict], outcome: str, path: str | Path, effect_label: str = "effect") -> Path:
    """Point estimates with CIs per tested node; filled markers mark rejected nulls."""
    path = Path(path)
    tested = [r for r in rows if r.get("estimate") is not None]
    with house_style():
        fig, ax = plt.subplots(figsize=(5.0, 0.45 * max(len(rows), 1) + 1.0))
        for i, r in enumerate(rows):
            y = len(rows) - 1 - i
            if r.get("estimate") is None:
                ax.text(0.5, y, "not reached", va="center", ha="center", fontsize=7, color="0.5",
                        transform=ax.get_yaxis_transform())
                continue
            lo = r["ci_low"] if r["ci_low"] is not None else -math.inf
            hi = r["ci_high"] if r["ci_high"] is not None else math.inf
            ax.plot([lo, hi], [y, y], color="0.2", lw=1)
            rejected = r.get("decision") == "rejected"
            ax.plot(r["estimate"], y, "o", ms=5, color="0.1", mfc="0.1" if rejected else "white")
        ax.axvline(0.0, color="0.6", lw=0.8, ls="--")
        ax.set_ylim(-0.6, len(rows) - 0.4)
        ax.set_yticks(range(len(rows)))
        ax.set_yticklabels([r["node"] for r in reversed(rows)])
        ax.set_xlabel(effect_label)
        ax.set_title(f"{outcome}: estimates and confidence intervals" if tested else f"{outcome}: nothing tested")
        return _save(fig, path)
