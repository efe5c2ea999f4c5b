"""Render figures from a finished run directory: per-step potential
traces from the ledger CSV and cost summaries, written as PNG files
alongside the delimited outputs."""

from __future__ import annotations

import csv
import json
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

__all__ = ["render_run_figures", "render_ratio_figure"]


def _load_ledger(path):
    with open(path) as fh:
        reader = csv.DictReader(fh)
        rows = [row for row in reader]
    return rows


def render_run_figures(stem: str, out_dir: str = None):
    """stem: the run output path without the .jsonl suffix."""
    out_dir = out_dir or os.path.dirname(stem) or "."
    made = []
    summary_path = stem + ".summary.json"
    ledger_path = stem + ".ledger.csv"
    if os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        fig, ax = plt.subplots(figsize=(5, 3.2))
        per = summary["per_replica"]
        idx = range(len(per["frac_costs"]))
        ax.bar([i - 0.2 for i in idx], per["frac_costs"], width=0.4, label="fractional")
        ax.bar([i + 0.2 for i in idx], per["integral_x_costs"], width=0.4, label="integral")
        if summary.get("opt_cost"):
            ax.axhline(summary["opt_cost"], color="k", ls="--", lw=1, label="offline opt")
        ax.set_xlabel("replica")
        ax.set_ylabel("cost")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, os.path.basename(stem) + ".costs.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        made.append(path)
    if os.path.exists(ledger_path):
        rows = _load_ledger(ledger_path)
        if rows:
            replicas = sorted({r["replica"] for r in rows})
            fig, axes = plt.subplots(3, 1, figsize=(6, 6), sharex=True)
            for rep in replicas:
                sel = [r for r in rows if r["replica"] == rep]
                ts = [int(r["t"]) for r in sel]
                for ax, col in zip(axes, ("phi_t", "psi_a_t", "psi_f_t")):
                    ax.plot(ts, [float(r[col]) for r in sel], lw=0.8, label=f"replica {rep}")
            for ax, name in zip(axes, ("solver potential", "accuracy potential", "fission potential")):
                ax.set_ylabel(name, fontsize=8)
            axes[-1].set_xlabel("t")
            axes[0].legend(frameon=False, fontsize=7)
            fig.tight_layout()
            path = os.path.join(out_dir, os.path.basename(stem) + ".potentials.png")
            fig.savefig(path, dpi=150)
            plt.close(fig)
            made.append(path)
    return made


def render_ratio_figure(summaries, out_path: str):
    """Ratio-vs-k trend across a batch of summary dicts."""
    ks = [s["config"]["k"] for s in summaries]
    ratios = [s["ratio"] for s in summaries]
    fig, ax = plt.subplots(figsize=(4.2, 3))
    ax.plot(ks, ratios, "o-", label="ratio(k)")
    ax.plot(ks, [r / k for r, k in zip(ratios, ks)], "s--", label="ratio(k)/k")
    ax.set_xlabel("k")
    ax.set_xscale("log", base=2)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
