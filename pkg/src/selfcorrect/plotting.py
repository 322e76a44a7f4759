"""Report figures (written to files; the Agg backend never opens a window)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import RecoveryReport, RuntimeShares, SweepReport  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_psucc_vs_n(report: SweepReport, path: str | Path, metric: str = "l2") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for task in sorted({r.task for r in report.rows}):
            rows = sorted((r for r in report.rows if r.task == task and r.metric == metric), key=lambda r: r.n)
            if not rows:
                continue
            ns = [r.n for r in rows]
            ax.plot(ns, [r.mbr for r in rows], "o-", label=f"{task} consensus")
            ax.plot(ns, [r.random for r in rows], "s--", label=f"{task} random")
            ax.fill_between(ns, [r.random + r.ci_low for r in rows], [r.random + r.ci_high for r in rows], alpha=0.15)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("hypotheses N")
        ax.set_ylabel("P(successful chunk selected)")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_metric_comparison(report: SweepReport, path: str | Path, n: int | None = None) -> Path:
    with plt.rc_context(STYLE):
        n = n if n is not None else sorted({r.n for r in report.rows})[0]
        rows = [r for r in report.rows if r.n == n]
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        labels = [f"{r.metric}\n{r.task}" if len({x.task for x in rows}) > 1 else r.metric for r in rows]
        ax.bar(labels, [r.mbr for r in rows], color="tab:blue", label="consensus")
        ax.scatter(labels, [r.random for r in rows], color="k", marker="_", s=200, label="random", zorder=3)
        ax.errorbar(labels, [r.mbr for r in rows],
                    yerr=[[r.delta - r.ci_low for r in rows], [r.ci_high - r.delta for r in rows]],
                    fmt="none", ecolor="gray", capsize=3)
        ax.set_ylabel(f"P(successful chunk selected), N={n}")
        ax.set_ylim(0, 1.02)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def plot_recovery(report: RecoveryReport, path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        modes = list(report.success)
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.bar(modes, [report.success[m] for m in modes], color="tab:green")
        for i, m in enumerate(modes):
            ax.text(i, report.success[m] + 0.02, f"{report.success[m]:.2f}", ha="center")
        ax.set_ylabel("episode success rate")
        ax.set_ylim(0, 1.1)
        return _save(fig, path)


def plot_runtime_shares(shares: RuntimeShares, path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        comps = [c for c, v in shares.percent.items() if v > 0]
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        ax.barh(comps, [shares.percent[c] for c in comps], color="tab:orange")
        ax.set_xlabel("share of inference time (%)")
        ax.set_xlim(0, 100)
        return _save(fig, path)
