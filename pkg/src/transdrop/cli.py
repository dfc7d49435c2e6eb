"""Command-line entry point: ``transdrop <command>``."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import RunConfig, RunConfigError, load_config, parse_sets
from .data import (DataError, LabelledSet, binarize_largest_class, build_augmented, gen_toy,
                   load_builtin, load_csv, load_features_csv, read_table, shift_split, write_csv,
                   write_labelled)
from .network import Ensemble, MLPSpec, load_checkpoint, save_checkpoint
from .training import ConfigError, default_policy, grid_search, train

OUTPUT_ROOT_ENV = "TRANSDROP_OUTPUT_ROOT"

log = logging.getLogger("transdrop")


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise click.ClickException(f"cannot create output directory {p}: {exc}") from None
    return p


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig | None, artifacts, extra=None):
    doc = {"command": command, "version": __version__,
           "config": None if cfg is None else cfg.to_dict(),
           "artifacts": {Path(a).name: _sha256(Path(a)) for a in artifacts}}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _config(config_path, sets, **flags) -> RunConfig:
    try:
        overrides = parse_sets(sets)
        overrides.update({k: v for k, v in flags.items() if v is not None})
        return load_config(config_path, overrides)
    except RunConfigError as exc:
        raise click.UsageError(str(exc)) from None


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="Run configuration file (key = value, INI sections).")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override a configuration key; repeatable.")
out_option = click.option("--out-dir", default=None, help="Output directory.")
seed_option = click.option("--seed", type=int, default=None, help="Master random seed.")


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Transductive dropout experiments: data, training, evaluation, plots."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


# gen-toy ---------------------------------------------------------------------

@main.command("gen-toy")
@seed_option
@click.option("--n-src", type=int, default=50, show_default=True)
@click.option("--n-tgt", type=int, default=50, show_default=True)
@click.option("--noise-sd", type=float, default=0.1, show_default=True)
@out_option
def gen_toy_cmd(seed, n_src, n_tgt, noise_sd, out_dir):
    """Write the 1-d toy source/target data and the hidden target labels."""
    if n_src < 1 or n_tgt < 1:
        raise click.BadParameter("n-src and n-tgt must be at least 1")
    seed = 0 if seed is None else seed
    out = _out_dir(out_dir or "toy")
    src, tgt, yt = gen_toy(seed, n_src, n_tgt, noise_sd)
    files = [out / "source.csv", out / "target.csv", out / "target_labels.csv"]
    write_labelled(files[0], src)
    write_csv(files[1], ["x"], tgt.features.tolist())
    write_csv(files[2], ["x", "y"], [[x, y] for x, y in zip(tgt.features[:, 0], yt)])
    _write_manifest(out, "gen-toy", None, files,
                    {"seed": seed, "n_src": n_src, "n_tgt": n_tgt, "noise_sd": noise_sd})
    click.echo(f"wrote {', '.join(str(f) for f in files)}")


# split -----------------------------------------------------------------------

def _read_raw_labelled(source: str, label_column: str) -> tuple[LabelledSet, list]:
    if source.startswith("builtin:"):
        data, target = load_builtin(source.split(":", 1)[1])
        return data, [int(t) for t in target]
    header, body = read_table(source)
    if label_column not in header:
        raise DataError(f"{source}: label column {label_column!r} not found")
    li = header.index(label_column)
    raw = [r[li].strip() for r in body]
    feats = load_csv(source, label_column, positive_class=raw[0] if raw else None)
    return feats, raw


@main.command("split")
@click.argument("source")
@config_option
@set_option
@seed_option
@click.option("--label-column", default=None)
@click.option("--positive-class", default=None,
              help="Class mapped to 1; default is the most populous class.")
@click.option("--from-manifest", type=click.Path(exists=True, dir_okay=False),
              help="Replay the configuration recorded by an earlier split.")
@out_option
def split_cmd(source, config_path, sets, seed, label_column, positive_class, from_manifest,
              out_dir):
    """Binarise SOURCE (a CSV or builtin:<name>) and draw a covariate-shifted test split."""
    if from_manifest:
        recorded = json.loads(Path(from_manifest).read_text())["config"]
        cfg = RunConfig(**recorded)
        if out_dir:
            cfg.out_dir = out_dir
    else:
        cfg = _config(config_path, sets, seed=seed, label_column=label_column,
                      positive_class=positive_class, out_dir=out_dir)
    try:
        data, raw = _read_raw_labelled(source, cfg.label_column)
        if cfg.positive_class:
            labels = np.array([1.0 if str(v) == cfg.positive_class else 0.0 for v in raw])
            if labels.min() == labels.max():
                raise DataError("positive class yields a single-class problem")
        else:
            labels = binarize_largest_class(raw)
        data = LabelledSet(data.features, labels, data.feature_names)
        train_set, test_set, test_idx = shift_split(data, cfg.split_spec())
    except DataError as exc:
        raise click.ClickException(str(exc)) from None
    out = _out_dir(cfg.out_dir)
    files = [out / "train.csv", out / "test.csv", out / "target.csv"]
    write_labelled(files[0], train_set, cfg.label_column)
    write_labelled(files[1], test_set, cfg.label_column)
    write_csv(files[2], test_set.feature_names, test_set.features.tolist())
    train_idx = np.setdiff1d(np.arange(len(data)), test_idx)
    _write_manifest(out, "split", cfg, files,
                    {"source": source, "test_rows": test_idx.tolist(),
                     "train_rows": train_idx.tolist()})
    click.echo(f"train {len(train_set)} rows, test {len(test_set)} rows -> {out}")


# train -----------------------------------------------------------------------

def _task(cfg: RunConfig, labels) -> str:
    if cfg.task != "auto":
        return cfg.task
    uniq = set(np.unique(labels).tolist())
    return "binary-classification" if uniq <= {0.0, 1.0} and len(uniq) == 2 else "regression"


def _fit(cfg: RunConfig):
    if not cfg.train_csv:
        raise click.UsageError("train needs train_csv (labelled source data)")
    if not Path(cfg.train_csv).exists():
        raise click.ClickException(f"dataset not found: {cfg.train_csv}")
    source = load_csv(cfg.train_csv, cfg.label_column)
    if cfg.target_csv:
        if not Path(cfg.target_csv).exists():
            raise click.ClickException(f"dataset not found: {cfg.target_csv}")
        target = load_features_csv(cfg.target_csv)
        target.features = target.features[:, [target.feature_names.index(n)
                                               for n in source.feature_names]]
    else:
        target = np.empty((0, source.features.shape[1]))
    task = _task(cfg, source.labels)
    spec = MLPSpec(source.features.shape[1], cfg.hidden, 1, task)
    policy = default_policy(cfg.method, cfg.dropout_rate, cfg.temperature, cfg.rate_clamp)
    tcfg = cfg.train_config()
    grid = [float(v) for v in cfg.lam_grid.split(",") if v.strip()]
    if grid and cfg.method == "transductive":
        res = grid_search(tcfg, grid, spec, policy, source, target)
        return res.model, res.report, source, {"lam": res.config.objective.lam,
                                               "grid_scores": res.scores}
    model, report = train(spec, policy, build_augmented(source, target), tcfg)
    return model, report, source, {}


@main.command("train")
@config_option
@set_option
@seed_option
@click.option("--method", default=None)
@click.option("--lam", type=float, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--train-csv", default=None)
@click.option("--target-csv", default=None)
@click.option("--label-column", default=None)
@out_option
def train_cmd(config_path, sets, seed, method, lam, epochs, train_csv, target_csv, label_column,
              out_dir):
    """Train one model and write its checkpoint and training report."""
    cfg = _config(config_path, sets, seed=seed, method=method, lam=lam, epochs=epochs,
                  train_csv=train_csv, target_csv=target_csv, label_column=label_column,
                  out_dir=out_dir)
    try:
        model, report, _, extra = _fit(cfg)
    except (ConfigError, DataError, ValueError) as exc:
        raise click.ClickException(str(exc)) from None
    out = _out_dir(cfg.out_dir)
    ckpt = out / "checkpoint.json"
    save_checkpoint(model, ckpt, meta={"config": cfg.to_dict(), **extra})
    report.checkpoint = ckpt.name
    rep = out / "train_report.jsonl"
    rep.write_text(report.to_json(cfg.train_config()) + "\n")
    _write_manifest(out, "train", cfg, [ckpt], extra)
    click.echo(f"final data loss {report.data_loss[-1]:.5f} -> {ckpt}")


# eval ------------------------------------------------------------------------

def _write_detail(path: Path, detail):
    keys = ["mean", "sd", "lo", "hi", "label", "error"]
    with open(path, "w") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in zip(*(detail[k] for k in keys)):
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")


def _write_tsv(path: Path, header, rows):
    with open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for r in rows:
            fh.write("\t".join(repr(float(v)) for v in r) + "\n")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--test-csv", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--label-column", default=None)
@click.option("-M", "--samples", "m", type=int, default=None, help="MC samples per point.")
@config_option
@set_option
@seed_option
@out_option
def eval_cmd(checkpoint, test_csv, label_column, m, config_path, sets, seed, out_dir):
    """Compute the uncertainty metrics of CHECKPOINT on labelled test data."""
    from . import plotting
    from .evaluation import evaluate, inpt_curve

    cfg = _config(config_path, sets, seed=seed, label_column=label_column, m_eval=m,
                  out_dir=out_dir)
    if cfg.m_eval < 2:
        raise click.UsageError("at least 2 MC samples are needed (-M >= 2)")
    model = load_checkpoint(checkpoint)
    try:
        test = load_csv(test_csv, cfg.label_column)
    except DataError as exc:
        raise click.ClickException(str(exc)) from None
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
    report = evaluate(model, test.features, test.labels, cfg.m_eval, rng, cfg.noise_sd,
                      cfg.risk_threshold)
    out = _out_dir(cfg.out_dir)
    metrics = out / "metrics.json"
    metrics.write_text(report.to_json())
    detail = out / "detail.tsv"
    _write_detail(detail, report.detail)
    files = [metrics, detail]
    if model.spec.task == "binary-classification":
        curve = inpt_curve(report.detail, cfg.curve_threshold)
        cpath = out / "inpt_curve.tsv"
        _write_tsv(cpath, ["width", "count"], curve)
        plotting.treatment_curves(out / "inpt_curve.png", {"model": curve}, cfg.curve_threshold)
        files.append(cpath)
    _write_manifest(out, "eval", cfg, files, {"checkpoint": Path(checkpoint).name})
    click.echo(json.dumps(report.summary(), sort_keys=True))


# benchmark -------------------------------------------------------------------

@main.command("benchmark")
@config_option
@set_option
@click.option("--methods", default=None, help="Comma-separated subset of methods.")
@click.option("--datasets", default=None, help="Comma-separated builtin names or CSV paths.")
@click.option("--seeds", "n_seeds", type=int, default=None, help="Number of seeds (0..n-1).")
@click.option("--workers", type=int, default=None, help="Worker processes (0 = all cores).")
@out_option
def benchmark_cmd(config_path, sets, methods, datasets, n_seeds, workers, out_dir):
    """Run the method x dataset x seed matrix and write the results table."""
    from . import plotting
    from .evaluation import BenchmarkSettings, benchmark, default_workers

    cfg = _config(config_path, sets, methods=methods, datasets=datasets, n_seeds=n_seeds,
                  workers=workers, out_dir=out_dir)
    names = [m.strip() for m in cfg.methods.split(",") if m.strip()]
    ds = {}
    for d in (d.strip() for d in cfg.datasets.split(",") if d.strip()):
        if d.endswith(".csv"):
            ds[Path(d).stem] = load_csv(d, cfg.label_column, binarize=True)
        else:
            ds[d] = d
    grid = tuple(float(v) for v in cfg.lam_grid.split(",") if v.strip()) or None
    settings = BenchmarkSettings(cfg.hidden, cfg.m_eval,
                                 cfg.split_spec(), grid)
    try:
        tcfg = cfg.train_config()
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    n_workers = cfg.workers or default_workers()
    table = benchmark(names, ds, range(cfg.n_seeds), tcfg, settings, workers=n_workers)
    out = _out_dir(cfg.out_dir)
    cells, runs, text = out / "benchmark.jsonl", out / "runs.jsonl", out / "table.txt"
    table.write_records(cells)
    table.write_runs(runs)
    text.write_text(table.to_text())
    plotting.benchmark_bars(out / "error_pred.png", table)
    _write_manifest(out, "benchmark", cfg, [cells, runs, text])
    click.echo(table.to_text(), nl=False)
    failed = [c for c in table.records() if c["status"] == "failed"]
    if failed:
        click.echo(f"{len(failed)} cell(s) failed; see {cells}", err=True)
        sys.exit(1)


# plot-data -------------------------------------------------------------------

def _parse_grid(spec: str) -> np.ndarray:
    try:
        lo, hi, step = (float(v) for v in spec.split(":"))
    except ValueError:
        raise click.BadParameter("grid must be lo:hi:step") from None
    n = int(round((hi - lo) / step)) + 1
    return lo + step * np.arange(n)


@main.command("plot-data")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_spec", default="0:16:0.1", show_default=True,
              help="lo:hi:step grid for 1-d inputs.")
@click.option("--source-csv", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--target-csv", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("-M", "--samples", "m", type=int, default=None)
@config_option
@set_option
@seed_option
@out_option
def plot_data_cmd(checkpoint, grid_spec, source_csv, target_csv, m, config_path, sets, seed,
                  out_dir):
    """Write predictive-band and dropout-rate density data (TSV) and figures (PNG)."""
    from . import plotting
    from .evaluation import rate_density
    from .inference import mc_predict, summarize_columns

    cfg = _config(config_path, sets, seed=seed, m_eval=m, out_dir=out_dir)
    if cfg.m_eval < 2:
        raise click.UsageError("at least 2 MC samples are needed (-M >= 2)")
    model = load_checkpoint(checkpoint)
    out = _out_dir(cfg.out_dir)
    files = []
    src = load_csv(source_csv, cfg.label_column) if source_csv else None
    tgt = load_features_csv(target_csv) if target_csv else None
    if model.spec.input_dim == 1:
        grid = _parse_grid(grid_spec)
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        s = summarize_columns(mc_predict(model, grid, cfg.m_eval, rng))
        p = out / "predictive.tsv"
        _write_tsv(p, ["x", "mean", "lo", "hi"], zip(grid, s["mean"], s["lo"], s["hi"]))
        files.append(p)
        plotting.predictive_band(out / "predictive.png", grid, s["mean"], s["lo"], s["hi"],
                                 None if src is None else src.features[:, 0],
                                 None if src is None else src.labels,
                                 None if tgt is None else tgt.features[:, 0])
    members = model.members if isinstance(model, Ensemble) else [model]
    if members[0].dropout.kind == "feature" and src is not None and tgt is not None:
        dens = rate_density(model, src.features, tgt.features)
        p = out / "rate_density.tsv"
        _write_tsv(p, ["rate", "source", "target"],
                   zip(dens["grid"], dens["source"], dens["target"]))
        files.append(p)
        plotting.rate_densities(out / "rate_density.png", dens["grid"], dens["source"],
                                dens["target"])
    if not files:
        raise click.ClickException("nothing to plot: 1-d model or feature-dependent policy "
                                   "with --source-csv/--target-csv required")
    _write_manifest(out, "plot-data", cfg, files, {"checkpoint": Path(checkpoint).name})
    click.echo(f"wrote {', '.join(f.name for f in files)} -> {out}")


if __name__ == "__main__":
    main()
