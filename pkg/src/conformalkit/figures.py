"""Figure rendering for CLI reports.

Matplotlib is imported lazily and driven through the Agg backend, so report
rendering works headless and importing the core library never pays for it.
Each function writes one PNG next to the delimited report data.
"""

from __future__ import annotations

from pathlib import Path

_STYLE = {
    "figure.figsize": (4.2, 3.2),
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.axisbelow": True,
}


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    return plt


def reliability_diagram(report, path, title: str = "Reliability") -> Path:
    """Accuracy-versus-confidence bars with the identity diagonal."""
    plt = _plt()
    path = Path(path)
    rows = report.reliability_rows()
    mids = [r[0] for r in rows]
    accs = [r[1] for r in rows]
    counts = [r[2] for r in rows]
    width = 1.0 / max(len(rows), 1)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar(mids, accs, width=width * 0.9, edgecolor="black", linewidth=0.5,
               color="#4878cf", label="accuracy")
        ax.plot([0, 1], [0, 1], "k--", linewidth=1, label="perfect")
        for mid, acc, count in zip(mids, accs, counts):
            if count:
                ax.annotate(str(count), (mid, acc), ha="center", va="bottom", fontsize=6)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        ax.set_title(f"{title} (ECE = {report.ece:.4f})")
        ax.legend(loc="upper left", fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def coverage_figure(report, path, label: str = "coverage") -> Path:
    """Observed rate against the nominal target."""
    plt = _plt()
    path = Path(path)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.bar([0], [report.rate], width=0.5, color="#6acc65", edgecolor="black", linewidth=0.5)
        ax.axhline(report.target, color="black", linestyle="--", linewidth=1,
                   label=f"target {report.target:.3f}")
        ax.set_xticks([0])
        ax.set_xticklabels([label])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("empirical coverage")
        ax.set_title(f"{report.covered}/{report.trials} covered")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def sweep_figure(table, path) -> Path:
    """Headline metric of each sweep row against the swept parameter."""
    plt = _plt()
    path = Path(path)
    metric = "coverage" if any("coverage" in r for r in table.rows) else "mean_us"
    xs, ys, targets = [], [], []
    for row in table.rows:
        if metric in row:
            xs.append(row[table.axis])
            ys.append(row[metric])
            targets.append(row.get("target"))
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        ax.plot(xs, ys, "o-", color="#4878cf", label=metric)
        if any(t is not None for t in targets):
            ax.plot(xs, targets, "k--", linewidth=1, label="target")
        ax.set_xlabel(table.axis)
        ax.set_ylabel(metric)
        ax.set_title(f"{table.task} sweep")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
