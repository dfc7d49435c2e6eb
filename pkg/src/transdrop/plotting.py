"""Figure rendering for the report path.

Everything here draws from the same arrays that are written to the TSV plot
files, so a figure can always be regenerated from its data file.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}
# png metadata carries a software/version stamp by default; drop it so
# re-rendering with the same data gives the same bytes
PNG_META = {"Software": None}


def _figure(width=5.0, height=3.2):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.tight_layout()
        fig.savefig(path, metadata=PNG_META)
    plt.close(fig)


def predictive_band(path, grid, mean, lo, hi, source_x=None, source_y=None, target_x=None,
                    title=None):
    """Posterior mean with its 95% interval over a 1-d grid."""
    fig, ax = _figure()
    ax.fill_between(grid, lo, hi, color="tab:blue", alpha=0.25, lw=0, label="95% interval")
    ax.plot(grid, mean, color="tab:blue", lw=1.5, label="mean")
    if source_x is not None and source_y is not None:
        ax.plot(source_x, source_y, "k.", ms=4, label="labelled (source)")
    if target_x is not None:
        lo_y = np.min(lo) if len(lo) else 0.0
        ax.plot(target_x, np.full(len(target_x), lo_y), "|", color="tab:red", ms=8,
                label="unlabelled (target)")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, loc="upper left")
    _save(fig, path)


def rate_densities(path, grid, source, target):
    fig, ax = _figure(4.0, 3.0)
    ax.plot(grid, source, color="tab:blue", label="source")
    ax.fill_between(grid, source, color="tab:blue", alpha=0.2, lw=0)
    ax.plot(grid, target, color="tab:red", label="target")
    ax.fill_between(grid, target, color="tab:red", alpha=0.2, lw=0)
    ax.set_xlim(0, 1)
    ax.set_xlabel("dropout rate")
    ax.set_ylabel("density")
    ax.legend(frameon=False)
    _save(fig, path)


def treatment_curves(path, curves: dict, risk_threshold: float):
    """Additional correctly treated points against interval width, one line per method."""
    fig, ax = _figure(4.5, 3.0)
    for name, pts in curves.items():
        w, c = zip(*pts)
        ax.step(w, c, where="post", label=name)
    ax.set_xlabel("interval width")
    ax.set_ylabel(f"extra treated (risk ≥ {risk_threshold:g})")
    ax.legend(frameon=False)
    _save(fig, path)


def benchmark_bars(path, table):
    """Grouped error-prediction AUROC bars (mean ± s.e.) for a benchmark table."""
    methods, datasets = table.methods, table.datasets
    fig, ax = _figure(max(4.0, 1.2 * len(datasets) * len(methods) / 3), 3.2)
    width = 0.8 / len(methods)
    x = np.arange(len(datasets))
    for i, m in enumerate(methods):
        means, errs = [], []
        for d in datasets:
            agg = table.cell(m, d)["error_pred_auroc"]
            means.append(np.nan if agg["mean"] is None else agg["mean"])
            errs.append(0.0 if agg["se"] is None else agg["se"])
        ax.bar(x + i * width, means, width, yerr=errs, label=m, capsize=2)
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(datasets)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("error-prediction AUROC")
    ax.legend(frameon=False, fontsize=6, ncol=2)
    _save(fig, path)
