"""Adam training loop over the augmented dataset for every model variant."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .autodiff import Tape, backward
from .data import AugmentedDataset, LabelledSet, build_augmented
from .network import (ConcreteLayerwise, DropoutPolicy, Ensemble, FeatureDependent, FixedRate,
                      LastLayerOnly, MLPModel, MLPSpec, NoDropout, forward, init,
                      predict_mean)
from .objective import Batch, ObjectiveConfig, objective_terms

METHODS = ("mlp", "mc-dropout", "concrete-dropout", "ensemble", "last-layer", "tdnr",
           "transductive", "mixmatch")

# methods whose policy must be of the given kind
_POLICY_KIND = {"mlp": "none", "ensemble": "none", "mc-dropout": "fixed",
                "mixmatch": "fixed", "concrete-dropout": "concrete",
                "last-layer": "last-layer", "tdnr": "feature", "transductive": "feature"}


class ConfigError(ValueError):
    pass


def default_policy(method: str, dropout_rate: float = 0.5, temperature: float = 0.1,
                   rate_clamp: float = 0.01) -> DropoutPolicy:
    kind = _POLICY_KIND.get(method)
    variant = {"none": NoDropout(), "fixed": FixedRate(dropout_rate),
               "concrete": ConcreteLayerwise(), "last-layer": LastLayerOnly(dropout_rate),
               "feature": FeatureDependent()}.get(kind)
    if variant is None:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    return DropoutPolicy(variant, temperature, rate_clamp)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "transductive"
    epochs: int = 500
    batch_labelled: int = 64
    # None -> proportional to the target/source size ratio
    batch_unlabelled: int | None = None
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ensemble_size: int = 10
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epochs < 1 or self.batch_labelled < 1:
            raise ConfigError("epochs and batch_labelled must be positive")
        if self.batch_unlabelled is not None and self.batch_unlabelled < 1:
            raise ConfigError("batch_unlabelled must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be positive")

    @property
    def effective_lambda(self) -> float:
        if self.method in ("transductive",):
            return self.objective.lam
        return 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    data_loss: list[float] = field(default_factory=list)
    omega: list[float] = field(default_factory=list)
    validation: list[float | None] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint: str | None = None
    members: list["TrainReport"] = field(default_factory=list)

    def to_dict(self):
        d = {"data_loss": self.data_loss, "omega": self.omega, "validation": self.validation,
             "wall_time": self.wall_time, "checkpoint": self.checkpoint}
        if self.members:
            d["members"] = [m.to_dict() for m in self.members]
        return d

    def to_json(self, config: TrainConfig | None = None) -> str:
        d = self.to_dict()
        if config is not None:
            d = {"config": config.to_dict(), **d}
        return json.dumps(d)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            params[k] = params[k] - update


def validation_split(data: LabelledSet, fraction: float = 0.1, seed=0):
    """Seeded shuffle split into ``(train part, validation part)``."""
    if not 0 < fraction < 1:
        raise ConfigError("validation fraction must lie in (0, 1)")
    n = len(data)
    n_val = int(round(fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(perm[n_val:])), data.subset(np.sort(perm[:n_val]))


def _validation_loss(model, validation: LabelledSet, task: str) -> float:
    p = predict_mean(model, validation.features)
    y = validation.labels
    if task == "regression":
        return float(np.mean((p - y) ** 2))
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _check(spec: MLPSpec, policy: DropoutPolicy, dataset: AugmentedDataset, config: TrainConfig):
    if dataset.n_source == 0:
        raise ConfigError("training needs at least one labelled point")
    want = _POLICY_KIND[config.method]
    if policy.kind != want:
        raise ConfigError(f"method {config.method!r} needs a {want!r} dropout policy, "
                          f"got {policy.kind!r}")
    if config.effective_lambda > 0 and dataset.n_target == 0:
        raise ConfigError(f"method {config.method!r} with lambda > 0 needs unlabelled points")
    if config.method == "mixmatch" and dataset.n_target == 0:
        raise ConfigError("mixmatch needs unlabelled points")
    if spec.input_dim != dataset.features.shape[1]:
        raise ConfigError(f"spec expects {spec.input_dim} features, data has "
                          f"{dataset.features.shape[1]}")


def train(spec: MLPSpec, policy: DropoutPolicy, dataset: AugmentedDataset, config: TrainConfig,
          validation: LabelledSet | None = None):
    """Train one model (or ``ensemble_size`` members for the ensemble method).

    Deterministic given ``(config, dataset)``.
    """
    _check(spec, policy, dataset, config)
    if config.method == "ensemble":
        start = time.perf_counter()
        members, reports = [], []
        for i in range(config.ensemble_size):
            member_cfg = replace(config, method="mlp", seed=config.seed + i)
            m, r = _train_single(spec, policy, dataset, member_cfg, validation)
            members.append(m)
            reports.append(r)
        n_ep = config.epochs
        report = TrainReport(
            data_loss=[float(np.mean([r.data_loss[e] for r in reports])) for e in range(n_ep)],
            omega=[0.0] * n_ep,
            validation=[None if validation is None else
                        float(np.mean([r.validation[e] for r in reports])) for e in range(n_ep)],
            members=reports)
        report.wall_time = time.perf_counter() - start
        return Ensemble(members), report
    return _train_single(spec, policy, dataset, config, validation)


def _train_single(spec, policy, dataset: AugmentedDataset, config: TrainConfig, validation):
    start = time.perf_counter()
    init_ss, loop_ss = np.random.SeedSequence(config.seed).spawn(2)
    model = init(spec, policy, seed=init_ss)
    model.scaler = (dataset.mean.copy(), dataset.sd.copy())
    rng = np.random.default_rng(loop_ss)

    obj = config.objective
    lam = config.effective_lambda
    if lam != obj.lam:
        obj = replace(obj, lam=lam)
    src_x, src_y, tgt_x = dataset.source_x, dataset.source_y, dataset.target_x
    n, m = len(src_x), len(tgt_x)
    b_l = min(config.batch_labelled, n)
    if config.batch_unlabelled is None:
        b_u = max(1, round(b_l * m / n)) if m else 0
    else:
        b_u = min(config.batch_unlabelled, m)
    steps = math.ceil(n / b_l)
    use_omega = lam > 0
    mixmatch = config.method == "mixmatch"
    # regulariser sum estimates the full augmented-set sum, divided by n so it
    # sits on the same per-point scale as the mean data loss
    omega_scale = (n + m) / (n * (b_l + b_u)) if use_omega else None

    opt = Adam(model.params, config.learning_rate, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    report = TrainReport()
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        losses, omegas = [], []
        for s in range(steps):
            idx = perm[s * b_l:(s + 1) * b_l]
            xb, yb = src_x[idx], src_y[idx]
            aug = None
            if use_omega or mixmatch:
                xu = tgt_x[rng.choice(m, size=b_u, replace=False)]
            if use_omega:
                aug = Batch(np.vstack([xb, xu]),
                            z=np.concatenate([np.zeros(len(xb)), np.ones(len(xu))]))
            if mixmatch:
                xb, yb = _mixmatch_batch(model, xb, yb, xu, obj.m_train, rng)
            tape = Tape()
            nodes = model.bind(tape)
            terms = objective_terms(model, Batch(xb, yb), aug, obj, rng,
                                    omega_scale=omega_scale, n_labelled=n, tape=tape,
                                    nodes=nodes)
            backward(tape, terms.total)
            opt.step(model.params, {k: nd.grad for k, nd in nodes.items()})
            losses.append(float(terms.data.value))
            omegas.append(0.0 if terms.omega is None else float(terms.omega.value))
        report.data_loss.append(float(np.mean(losses)))
        report.omega.append(float(np.mean(omegas)))
        report.validation.append(None if validation is None else
                                 _validation_loss(model, validation, spec.task))
    report.wall_time = time.perf_counter() - start
    return model, report


def _mixmatch_batch(model: MLPModel, xb, yb, xu, m_guess: int, rng):
    """One round of label guessing plus mixup, no sharpening."""
    # xu is already standardised; the model scaler must not be applied again
    out, _ = forward(model, np.tile(xu, (m_guess, 1)), "sampled", rng, standardized=True)
    guess = out.value[:, 0].reshape(m_guess, len(xu)).mean(axis=0)
    X = np.vstack([xb, xu])
    Y = np.concatenate([yb, guess])
    u = rng.beta(0.75, 0.75)
    lm = max(u, 1 - u)
    partner = rng.permutation(len(X))
    return lm * X + (1 - lm) * X[partner], lm * Y + (1 - lm) * Y[partner]


# Model selection -------------------------------------------------------------

@dataclass
class GridResult:
    config: TrainConfig
    scores: dict[float, float]
    model: object
    report: TrainReport


def grid_search(template: TrainConfig, lam_grid, spec: MLPSpec, policy: DropoutPolicy,
                labelled: LabelledSet, target, metric: Callable | None = None,
                val_fraction: float = 0.1) -> GridResult:
    """Train one model per lambda and keep the best on a held-out validation split.

    ``metric(model, validation_set)`` is maximised; ties go to the smaller lambda.
    The default metric averages error-prediction AUROC and test AUROC.
    """
    grid = sorted(set(float(v) for v in lam_grid))
    if not grid:
        raise ConfigError("empty lambda grid")
    if metric is None:
        from .evaluation import validation_score
        metric = validation_score
    fit, val = validation_split(labelled, val_fraction, template.seed)
    dataset = build_augmented(fit, target)
    best = None
    scores = {}
    for lam in grid:
        cfg = replace(template, objective=replace(template.objective, lam=lam))
        model, report = train(spec, policy, dataset, cfg, validation=val)
        score = float(metric(model, val))
        scores[lam] = score
        if best is None or score > best[0]:
            best = (score, cfg, model, report)
    _, cfg, model, report = best
    return GridResult(cfg, scores, model, report)
