"""Optional figures written next to the CLI's delimited output.

matplotlib is imported lazily so the estimation code never pays for it.
"""
from __future__ import annotations

from typing import Optional, Sequence


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def band_figure(index_grid, tau_hat, lower, upper, path: str, title: Optional[str] = None,
                xlabel: str = "index", truth=None) -> str:
    """Point estimate with its uniform band, saved to ``path``."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    ax.fill_between(index_grid, lower, upper, color="0.82", lw=0, label="uniform band")
    ax.plot(index_grid, tau_hat, color="k", lw=1.4, label="estimate")
    if truth is not None:
        ax.plot(index_grid, truth, color="tab:red", lw=1, ls="--", label="truth")
    ax.axhline(0.0, color="0.4", lw=0.6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("effect")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def mc_figure(rows: Sequence[dict], path: str, nominal: Optional[float] = None) -> str:
    """Frequencies with +-2 MC standard errors, one marker per cell."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    labels = [f"{r['check']}\nb={r['beta1']:g} g={r['gamma1']:g}" for r in rows]
    freq = [r["frequency"] for r in rows]
    err = [2 * r["mc_se"] for r in rows]
    ax.errorbar(range(len(rows)), freq, yerr=err, fmt="o", color="k", capsize=3)
    if nominal is not None:
        ax.axhline(nominal, color="tab:red", lw=0.8, ls="--")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("frequency")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
