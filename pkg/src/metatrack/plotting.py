"""Success-plot and alpha-search figures, written as byte-stable SVG."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "metatrack", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def success_plot(curves, thresholds, path, title="Success plot (OPE)"):
    """``curves`` is a list of (label, auc, success values); legend shows AUC."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.6))
        for label, auc, values in sorted(curves, key=lambda c: -c[1]):
            ax.plot(thresholds, values, label=f"{label} [{auc:.3f}]", linewidth=1.5)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("Overlap threshold")
        ax.set_ylabel("Success rate")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(loc="lower left", frameon=False)
        fig.tight_layout()
        _save(fig, path)


def alpha_plot(alphas, aucs, path, baseline=None):
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(alphas, aucs, marker="o", markersize=3, label="EMA")
        if baseline is not None:
            ax.axhline(baseline, color="gray", linestyle="--", label="no update")
        best = max(range(len(aucs)), key=lambda i: aucs[i])
        ax.plot([alphas[best]], [aucs[best]], "r*", markersize=9,
                label=f"best alpha={alphas[best]:g}")
        ax.set_xlabel("EMA rate alpha")
        ax.set_ylabel("AUC")
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
