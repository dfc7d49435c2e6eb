"""Flat ``key = value`` run configuration shared by every CLI command.

Files use INI sections purely for grouping; keys are unique across sections
and unknown keys are rejected. Command-line ``--set key=value`` pairs and
explicit flags override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .data import ShiftSplitSpec
from .objective import ObjectiveConfig
from .training import TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [data]
    train_csv: str = ""
    target_csv: str = ""
    test_csv: str = ""
    label_column: str = "y"
    positive_class: str = ""
    test_fraction: float = 0.2
    weighting_temperature: float = 1.0
    noise_sd: float = 0.1
    # [model]
    hidden_dims: str = "32,64"
    task: str = "auto"
    dropout_rate: float = 0.5
    temperature: float = 0.1
    rate_clamp: float = 0.01
    # [train]
    method: str = "transductive"
    epochs: int = 500
    batch_labelled: int = 64
    batch_unlabelled: int = 0
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ensemble_size: int = 10
    # [objective]
    lam: float = 1.0
    l2: float = 1e-4
    m_train: int = 32
    prob_clamp: float = 1e-6
    concrete_reg: float = 0.0
    # [eval]
    m_eval: int = 200
    risk_threshold: float = 0.15
    curve_threshold: float = 0.5
    # [benchmark]
    methods: str = "mc-dropout,concrete-dropout,ensemble,mixmatch,last-layer,tdnr,transductive"
    datasets: str = "breast_cancer,iris,wine"
    n_seeds: int = 10
    lam_grid: str = ""
    workers: int = 0
    # [output]
    out_dir: str = "out"

    @property
    def hidden(self) -> tuple[int, ...]:
        try:
            return tuple(int(h) for h in self.hidden_dims.split(",") if h.strip())
        except ValueError:
            raise RunConfigError(f"bad hidden_dims {self.hidden_dims!r}") from None

    def objective(self) -> ObjectiveConfig:
        return ObjectiveConfig(self.lam, self.l2, self.m_train, self.prob_clamp,
                               self.concrete_reg or None)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.method, self.epochs, self.batch_labelled,
                           self.batch_unlabelled or None, self.learning_rate, self.adam_beta1,
                           self.adam_beta2, self.adam_eps, self.seed, self.ensemble_size,
                           self.objective())

    def split_spec(self) -> ShiftSplitSpec:
        return ShiftSplitSpec(self.test_fraction, self.seed, self.weighting_temperature)

    def to_dict(self):
        return asdict(self)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, raw):
    f = _FIELDS.get(key)
    if f is None:
        raise RunConfigError(f"unknown config key {key!r}")
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except (TypeError, ValueError):
        raise RunConfigError(f"config key {key!r} expects {typ}, got {raw!r}") from None
    return str(raw)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        parser.read_string(text, source=str(path))
        seen = {}
        for section in parser.sections():
            for key, raw in parser.items(section):
                if key in seen:
                    raise RunConfigError(f"key {key!r} set in both [{seen[key]}] and [{section}]")
                seen[key] = section
                setattr(cfg, key, _convert(key, raw))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        setattr(cfg, key, _convert(key, raw))
    return cfg


def parse_sets(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise RunConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out

