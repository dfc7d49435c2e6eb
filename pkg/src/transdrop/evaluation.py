"""Uncertainty metrics, treatment-count analysis and the benchmark harness."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm, rankdata

from .data import LabelledSet, ShiftSplitSpec, build_augmented, builtin_binary, shift_split
from .inference import M_EVAL, mc_predict, summarize_columns
from .network import MLPSpec, rate_for
from .training import TrainConfig, default_policy, grid_search, train

log = logging.getLogger(__name__)

INPT_RISK = 0.15
CURVE_RISK = 0.5
KDE_GRID = 200


class UndefinedMetric(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("auroc needs both classes present")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def _auroc_or_none(scores, labels):
    try:
        return auroc(scores, labels)
    except UndefinedMetric:
        return None


# Per-point detail ------------------------------------------------------------

def predictive_detail(model, features, labels, M: int = M_EVAL, rng=None,
                      task: str | None = None, noise_sd: float = 0.1) -> dict[str, np.ndarray]:
    """MC summary per test point plus the error flag used by the metrics.

    Classification errors threshold the mean at 0.5; regression errors are
    absolute residuals above ``2 * noise_sd``.
    """
    task = task or model.spec.task
    samples = mc_predict(model, features, M, rng)
    d = summarize_columns(samples)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if task == "binary-classification":
        err = (d["mean"] >= 0.5).astype(float) != y
    else:
        err = np.abs(d["mean"] - y) > 2 * noise_sd
    d["label"] = y
    d["error"] = err.astype(bool)
    return d


def error_prediction_auroc(detail) -> float | None:
    """AUROC of predictive SD as a score for the model's errors (None if degenerate)."""
    return _auroc_or_none(detail["sd"], detail["error"])


def ci_width_mean(detail) -> float:
    return float(np.mean(np.asarray(detail["hi"]) - np.asarray(detail["lo"])))


def misclassified_sd(detail) -> float | None:
    err = np.asarray(detail["error"], dtype=bool)
    if not err.any():
        return None
    return float(np.mean(np.asarray(detail["sd"])[err]))


def inpt(detail, risk_threshold: float = INPT_RISK) -> int:
    """High-risk points denied by the point prediction but flagged by their interval.

    Flagged points are assumed to be handed to an expert who classifies them
    correctly.
    """
    y = np.asarray(detail["label"]) == 1
    mean = np.asarray(detail["mean"])
    hi = np.asarray(detail["hi"])
    return int(np.sum(y & (mean < risk_threshold) & (hi >= risk_threshold)))


def inpt_curve(detail, risk_threshold: float = CURVE_RISK, widths=None):
    """Count of flagged high-risk points when every interval is ``mean +- w/2``."""
    if widths is None:
        widths = np.linspace(0.0, 1.0, 21)
    y = np.asarray(detail["label"]) == 1
    mean = np.asarray(detail["mean"])
    denied = y & (mean < risk_threshold)
    return [(float(w), int(np.sum(denied & (mean + w / 2 >= risk_threshold)))) for w in widths]


# Report ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    test_auroc: float | None
    error_pred_auroc: float | None
    ci_width: float
    misclassified_sd: float | None
    inpt: int | None
    detail: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def summary(self) -> dict:
        return {"test_auroc": self.test_auroc, "error_pred_auroc": self.error_pred_auroc,
                "ci_width": self.ci_width, "misclassified_sd": self.misclassified_sd,
                "inpt": self.inpt, "n_test": int(len(self.detail.get("mean", []))),
                "n_errors": int(np.sum(self.detail.get("error", [])))}

    def to_json(self) -> str:
        doc = self.summary()
        doc["detail"] = {k: [float(v) if k != "error" else bool(v) for v in arr]
                         for k, arr in self.detail.items() if k != "variance"}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def evaluate(model, features, labels, M: int = M_EVAL, rng=None, noise_sd: float = 0.1,
             risk_threshold: float = INPT_RISK) -> MetricsReport:
    task = model.spec.task
    d = predictive_detail(model, features, labels, M, rng, task, noise_sd)
    classification = task == "binary-classification"
    return MetricsReport(
        test_auroc=_auroc_or_none(d["mean"], d["label"]) if classification else None,
        error_pred_auroc=error_prediction_auroc(d),
        ci_width=ci_width_mean(d),
        misclassified_sd=misclassified_sd(d),
        inpt=inpt(d, risk_threshold) if classification else None,
        detail=d,
    )


def validation_score(model, validation: LabelledSet, seed: int = 0) -> float:
    """Average of error-prediction AUROC and test AUROC; undefined parts count 0.5."""
    r = evaluate(model, validation.features, validation.labels, rng=np.random.default_rng(seed))
    parts = [r.error_pred_auroc]
    if model.spec.task == "binary-classification":
        parts.append(r.test_auroc)
    return float(np.mean([0.5 if p is None else p for p in parts]))


# Rate densities --------------------------------------------------------------

def silverman_bandwidth(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(sd, iqr / 1.349) if iqr > 0 else sd
    return float(0.9 * spread * v.size ** (-0.2))


def kde_unit_interval(values, bandwidth: float, grid=None) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian KDE on [0, 1], each kernel renormalised to its mass inside the interval."""
    grid = np.linspace(0.0, 1.0, KDE_GRID) if grid is None else np.asarray(grid)
    v = np.asarray(values, dtype=np.float64)
    mass = norm.cdf((1 - v) / bandwidth) - norm.cdf(-v / bandwidth)
    k = norm.pdf((grid[:, None] - v[None, :]) / bandwidth) / bandwidth
    return grid, (k / mass).mean(axis=1)


def rate_density(model, source_features, target_features, bandwidth: float | None = None):
    """Smoothed densities of learned dropout rates over source and target points."""
    rs = rate_for(model, source_features)
    rt = rate_for(model, target_features)
    if bandwidth is None:
        # floor at one grid step so constant rates still resolve on the grid
        bandwidth = max(silverman_bandwidth(np.concatenate([rs, rt])), 1.0 / (KDE_GRID - 1))
    grid, ds = kde_unit_interval(rs, bandwidth)
    _, dt = kde_unit_interval(rt, bandwidth, grid)
    return {"grid": grid, "source": ds, "target": dt, "bandwidth": bandwidth,
            "source_rates": rs, "target_rates": rt}


# Benchmark -------------------------------------------------------------------

TABLE_METHODS = ("mc-dropout", "concrete-dropout", "ensemble", "mixmatch", "last-layer",
                 "tdnr", "transductive")
METRIC_KEYS = ("test_auroc", "error_pred_auroc", "ci_width", "misclassified_sd", "inpt")


@dataclass
class BenchmarkSettings:
    hidden_dims: tuple[int, ...] = (32, 64)
    eval_samples: int = M_EVAL
    split: ShiftSplitSpec = ShiftSplitSpec()
    lam_grid: tuple[float, ...] | None = None


def _load_dataset(dataset) -> LabelledSet:
    if isinstance(dataset, LabelledSet):
        return dataset
    return builtin_binary(dataset)


def run_cell(method: str, dataset_name: str, data: LabelledSet, seed: int,
             template: TrainConfig, settings: BenchmarkSettings) -> dict:
    """Train and evaluate one (method, dataset, seed) run; returns a flat record."""
    record = {"method": method, "dataset": dataset_name, "seed": seed}
    try:
        train_set, test_set, test_idx = shift_split(data, replace(settings.split, seed=seed))
        spec = MLPSpec(data.features.shape[1], settings.hidden_dims, 1, "binary-classification")
        policy = default_policy(method)
        cfg = replace(template, method=method, seed=seed)
        if settings.lam_grid and method == "transductive":
            res = grid_search(cfg, settings.lam_grid, spec, policy, train_set, test_set)
            model = res.model
            record["lam"] = res.config.objective.lam
            record["grid_scores"] = {str(k): v for k, v in res.scores.items()}
        else:
            model, _ = train(spec, policy, build_augmented(train_set, test_set), cfg)
        rng = np.random.default_rng([seed, 7919])
        report = evaluate(model, test_set.features, test_set.labels, settings.eval_samples, rng)
        record.update(report.summary())
        record["status"] = "ok"
    except Exception as exc:  # a failed cell is recorded, the table still gets built
        log.exception("cell %s/%s/%s failed", method, dataset_name, seed)
        record["status"] = "failed"
        record["reason"] = f"{type(exc).__name__}: {exc}"
    return record


def _aggregate(values):
    v = np.array([x for x in values if x is not None], dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "se": None, "n": 0}
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "se": se, "n": int(v.size)}


@dataclass
class BenchmarkTable:
    cells: dict[tuple[str, str], dict]
    runs: list[dict]
    seeds: list[int]
    methods: list[str]
    datasets: list[str]

    def cell(self, method, dataset) -> dict:
        return self.cells[(method, dataset)]

    def records(self) -> list[dict]:
        return [self.cells[(m, d)] for m in self.methods for d in self.datasets]

    def write_records(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def write_runs(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.runs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def to_text(self) -> str:
        def fmt(agg):
            if agg["mean"] is None:
                return "n/a"
            return f"{agg['mean']:.3f} ± {agg['se']:.3f}"

        head = ["Method"]
        sub = [""]
        for d in self.datasets:
            head += [d, ""]
            sub += ["Test Perf.", "Error Pred."]
        rows = [head, sub]
        for m in self.methods:
            row = [m]
            for d in self.datasets:
                c = self.cells[(m, d)]
                if c["status"] == "failed":
                    row += ["failed", "failed"]
                else:
                    row += [fmt(c["test_auroc"]), fmt(c["error_pred_auroc"])]
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(2, "-" * len(lines[0]))
        lines.append(f"(mean ± standard error over {len(self.seeds)} seeds)")
        return "\n".join(lines) + "\n"


def _run_cell_args(args):
    return run_cell(*args)


def benchmark(methods, datasets, seeds, configs: dict[str, TrainConfig] | TrainConfig | None = None,
              settings: BenchmarkSettings | None = None, workers: int = 1) -> BenchmarkTable:
    """Run every (method, dataset, seed) cell and aggregate mean ± standard error.

    ``datasets`` maps names to :class:`LabelledSet` (binary labels) or lists
    builtin names. ``configs`` gives a per-method training template.
    """
    methods, seeds = list(methods), list(seeds)
    if isinstance(datasets, dict):
        data = {k: _load_dataset(v) for k, v in datasets.items()}
    else:
        data = {name: _load_dataset(name) for name in datasets}
    if not methods or not data or not seeds:
        raise ValueError("benchmark needs at least one method, dataset and seed")
    settings = settings or BenchmarkSettings()
    if configs is None or isinstance(configs, TrainConfig):
        base = configs or TrainConfig()
        configs = {m: base for m in methods}
    jobs = [(m, d, data[d], s, configs.get(m, TrainConfig()), settings)
            for m in methods for d in data for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            runs = list(pool.map(_run_cell_args, jobs))
    else:
        runs = [run_cell(*j) for j in jobs]
    cells = {}
    for m in methods:
        for d in data:
            rs = [r for r in runs if r["method"] == m and r["dataset"] == d]
            ok = [r for r in rs if r["status"] == "ok"]
            cell = {"method": m, "dataset": d, "n_runs": len(rs), "n_ok": len(ok),
                    "status": "ok" if ok else "failed"}
            if not ok:
                cell["reason"] = "; ".join(sorted({r.get("reason", "") for r in rs}))
            for k in METRIC_KEYS:
                cell[k] = _aggregate([r.get(k) for r in ok])
            cells[(m, d)] = cell
    return BenchmarkTable(cells, runs, seeds, methods, list(data))


def default_workers() -> int:
    return os.cpu_count() or 1
