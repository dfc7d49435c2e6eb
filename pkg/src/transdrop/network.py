"""MLP definition, initialisation and stochastic forward passes.

Weights follow the ``x @ W`` convention, i.e. ``W`` has shape
``(fan_in, fan_out)``. Dropout acts on hidden-unit outputs only and uses
inverted scaling: a kept unit is divided by its keep probability, so the
mask-free deterministic pass is the expectation of the stochastic one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .autodiff import Node, Tape

INIT_SD = 0.1
RATE_NET_HIDDEN = 16
RATE_NET_INIT = 0.1
CHECKPOINT_FORMAT = "transdrop-checkpoint"
CHECKPOINT_VERSION = 1

Task = Literal["regression", "binary-classification"]


def logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_dims: tuple[int, ...]
    output_dim: int = 1
    task: Task = "regression"
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ValueError("hidden_dims must be nonempty")
        if min((self.input_dim, self.output_dim) + self.hidden_dims) < 1:
            raise ValueError("layer sizes must be positive")
        if self.task not in ("regression", "binary-classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")

    @property
    def layer_dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.output_dim]

    def to_dict(self):
        return {"input_dim": self.input_dim, "hidden_dims": list(self.hidden_dims),
                "output_dim": self.output_dim, "task": self.task,
                "activation": self.activation}


# Dropout policies -----------------------------------------------------------

@dataclass(frozen=True)
class NoDropout:
    kind: str = field(default="none", init=False)


@dataclass(frozen=True)
class FixedRate:
    p: float = 0.5
    kind: str = field(default="fixed", init=False)


@dataclass(frozen=True)
class ConcreteLayerwise:
    init_rate: float = 0.1
    kind: str = field(default="concrete", init=False)


@dataclass(frozen=True)
class LastLayerOnly:
    p: float = 0.5
    kind: str = field(default="last-layer", init=False)


@dataclass(frozen=True)
class FeatureDependent:
    hidden: int = RATE_NET_HIDDEN
    init_rate: float = RATE_NET_INIT
    kind: str = field(default="feature", init=False)


Variant = NoDropout | FixedRate | ConcreteLayerwise | LastLayerOnly | FeatureDependent
_VARIANTS = {cls.kind: cls for cls in (NoDropout, FixedRate, ConcreteLayerwise,
                                       LastLayerOnly, FeatureDependent)}


@dataclass(frozen=True)
class DropoutPolicy:
    variant: Variant = field(default_factory=NoDropout)
    temperature: float = 0.1
    rate_clamp: float = 0.01

    def __post_init__(self):
        if not 0 < self.rate_clamp < 0.5:
            raise ValueError("rate_clamp must lie in (0, 0.5)")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        v = self.variant
        if isinstance(v, (FixedRate, LastLayerOnly)) and not 0 <= v.p < 1:
            raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def kind(self) -> str:
        return self.variant.kind

    @property
    def stochastic(self) -> bool:
        return self.kind != "none"

    def to_dict(self):
        v = {k: val for k, val in self.variant.__dict__.items() if k != "kind"}
        return {"kind": self.kind, "params": v, "temperature": self.temperature,
                "rate_clamp": self.rate_clamp}

    @classmethod
    def from_dict(cls, d):
        variant = _VARIANTS[d["kind"]](**d.get("params", {}))
        return cls(variant, d.get("temperature", 0.1), d.get("rate_clamp", 0.01))


# Model -----------------------------------------------------------------------

@dataclass
class MLPModel:
    """Network spec, named parameter arrays and the attached dropout policy.

    ``scaler`` holds the ``(mean, sd)`` input standardisation fitted on the
    source rows; forward passes take raw features and apply it.
    """

    spec: MLPSpec
    params: dict[str, np.ndarray]
    dropout: DropoutPolicy
    scaler: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def n_hidden(self) -> int:
        return len(self.spec.hidden_dims)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        i = 0
        for name, p in self.params.items():
            self.params[name] = theta[i:i + p.size].reshape(p.shape).copy()
            i += p.size
        if i != theta.size:
            raise ValueError(f"flat vector has {theta.size} entries, model needs {i}")

    def copy(self) -> "MLPModel":
        return MLPModel(self.spec, {k: v.copy() for k, v in self.params.items()},
                        self.dropout, self.scaler)

    def bind(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.var(p) for name, p in self.params.items()}

    def standardize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected {self.spec.input_dim} features, got {x.shape[1]}")
        if self.scaler is None:
            return x
        mean, sd = self.scaler
        return (x - mean) / sd


def _dense_init(rng: np.random.Generator, dims, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        out[f"{prefix}W{i}"] = rng.normal(0.0, INIT_SD, size=(fan_in, fan_out))
        out[f"{prefix}b{i}"] = np.zeros(fan_out)
    return out


def init(spec: MLPSpec, policy: DropoutPolicy | None = None, seed=0) -> MLPModel:
    policy = policy or DropoutPolicy()
    rng = np.random.default_rng(seed)
    params = _dense_init(rng, spec.layer_dims, "")
    v = policy.variant
    if isinstance(v, FeatureDependent):
        rate = _dense_init(rng, [spec.input_dim, v.hidden, 1], "rate/")
        rate["rate/b1"][:] = logit(v.init_rate)
        params.update(rate)
    elif isinstance(v, ConcreteLayerwise):
        for i in range(len(spec.hidden_dims)):
            params[f"drop_logit/{i}"] = np.array(logit(v.init_rate))
    return MLPModel(spec, params, policy)


def _dense(tape: Tape, h: Node, W: Node, b: Node) -> Node:
    z = tape.matmul(h, W)
    return tape.add(z, tape.broadcast(b, z.shape))


def _rate_node(model: MLPModel, tape: Tape, nodes, x: Node) -> Node:
    eps = model.dropout.rate_clamp
    h = tape.tanh(_dense(tape, x, nodes["rate/W0"], nodes["rate/b0"]))
    out = tape.sigmoid(_dense(tape, h, nodes["rate/W1"], nodes["rate/b1"]))
    return tape.clip(out, eps, 1.0 - eps)


def rate_for(model: MLPModel, x) -> np.ndarray:
    """Dropout rate produced by the rate network, one per input row."""
    if model.dropout.kind != "feature":
        raise TypeError("rate_for requires a feature-dependent dropout policy")
    tape = Tape()
    xs = tape.const(model.standardize(x))
    return _rate_node(model, tape, model.bind(tape), xs).value[:, 0].copy()


def layer_rates(model: MLPModel, tape: Tape, nodes, x: Node) -> list[Node | None]:
    """Per-hidden-layer rate nodes (``None`` = no dropout on that layer).

    Each rate node is either a scalar or an ``(n, 1)`` column.
    """
    L = model.n_hidden
    v = model.dropout.variant
    eps = model.dropout.rate_clamp
    if isinstance(v, NoDropout):
        return [None] * L
    if isinstance(v, FixedRate):
        r = tape.const(min(max(v.p, eps), 1 - eps))
        return [r] * L
    if isinstance(v, LastLayerOnly):
        return [None] * (L - 1) + [tape.const(min(max(v.p, eps), 1 - eps))]
    if isinstance(v, ConcreteLayerwise):
        return [tape.clip(tape.sigmoid(nodes[f"drop_logit/{i}"]), eps, 1 - eps)
                for i in range(L)]
    r = _rate_node(model, tape, nodes, x)
    return [r] * L


MaskMode = Literal["none", "sampled", "relaxed"]


def _mask(tape: Tape, rate: Node, shape, mode: str, rng, temperature):
    """Return ``(raw mask array, scaled mask node)`` for one hidden layer.

    ``rate`` is a scalar or an ``(n, 1)`` column; per-row quantities are
    computed on the column and only broadcast to the layer width at the end.
    """
    if mode == "sampled":
        keep = np.broadcast_to(1.0 - rate.value, shape)
        hard = (rng.random(shape) < keep).astype(np.float64)
        # hard masks are constants; no gradient reaches the rate here
        return hard, tape.const(hard / keep)
    keep = tape.sub(tape.const(1.0), rate)
    inv_t = tape.const(1.0 / temperature)
    lg = tape.mul(tape.sub(tape.log(keep), tape.log(rate)), inv_t)
    # log u - log(1 - u) for uniform u is standard logistic noise
    noise = tape.const(rng.logistic(0.0, 1.0 / temperature, size=shape))
    relaxed = tape.sigmoid(tape.add(noise, tape.broadcast(lg, shape)))
    return relaxed.value, tape.mul(relaxed, tape.broadcast(tape.reciprocal(keep), shape))


def forward(model: MLPModel, x, mask_mode: MaskMode = "none", rng=None,
            tape: Tape | None = None, nodes=None, standardized: bool = False):
    """Run the network; returns ``(output node, masks)``.

    ``masks`` lists the mask array applied to each hidden layer (``None`` where
    no dropout acted). Pass ``tape``/``nodes`` to keep the pass differentiable
    with respect to an existing parameter binding.
    """
    if mask_mode not in ("none", "sampled", "relaxed"):
        raise ValueError(f"unknown mask mode {mask_mode!r}")
    if mask_mode != "none" and rng is None:
        raise ValueError("stochastic mask modes need an rng")
    tape = tape if tape is not None else Tape()
    nodes = nodes if nodes is not None else model.bind(tape)
    xv = x.value if isinstance(x, Node) else (
        np.asarray(x, dtype=np.float64) if standardized else model.standardize(x))
    if xv.ndim != 2 or xv.shape[1] != model.spec.input_dim:
        raise ValueError(f"expected input of width {model.spec.input_dim}, got shape {xv.shape}")
    h = x if isinstance(x, Node) else tape.const(xv)
    rates = layer_rates(model, tape, nodes, h) if mask_mode != "none" else [None] * model.n_hidden
    masks = []
    for i in range(model.n_hidden):
        h = tape.tanh(_dense(tape, h, nodes[f"W{i}"], nodes[f"b{i}"]))
        if rates[i] is None:
            masks.append(None)
            continue
        raw, m = _mask(tape, rates[i], h.shape, mask_mode, rng, model.dropout.temperature)
        masks.append(raw)
        h = tape.mul(h, m)
    k = model.n_hidden
    out = _dense(tape, h, nodes[f"W{k}"], nodes[f"b{k}"])
    if model.spec.task == "binary-classification":
        out = tape.sigmoid(out)
    return out, masks


def predict_mean(model, x) -> np.ndarray:
    """Deterministic (mask-free) prediction, one value per row."""
    if isinstance(model, Ensemble):
        return np.mean([predict_mean(m, x) for m in model.members], axis=0)
    out, _ = forward(model, x, "none")
    return out.value[:, 0].copy()


@dataclass
class Ensemble:
    """Independently trained members; predictive samples are member outputs."""

    members: list[MLPModel]

    @property
    def spec(self) -> MLPSpec:
        return self.members[0].spec

    @property
    def dropout(self) -> DropoutPolicy:
        return self.members[0].dropout


# Checkpoints -----------------------------------------------------------------

def _model_to_dict(m: MLPModel):
    return {
        "spec": m.spec.to_dict(),
        "policy": m.dropout.to_dict(),
        "scaler": None if m.scaler is None else [m.scaler[0].tolist(), m.scaler[1].tolist()],
        "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                   for k, v in m.params.items()},
    }


def _model_from_dict(d) -> MLPModel:
    s = d["spec"]
    spec = MLPSpec(s["input_dim"], tuple(s["hidden_dims"]), s["output_dim"], s["task"],
                   s.get("activation", "tanh"))
    params = {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"])
              for k, v in d["params"].items()}
    scaler = None
    if d.get("scaler") is not None:
        scaler = (np.array(d["scaler"][0]), np.array(d["scaler"][1]))
    return MLPModel(spec, params, DropoutPolicy.from_dict(d["policy"]), scaler)


def save_checkpoint(model: MLPModel | Ensemble, path, meta=None) -> None:
    members = model.members if isinstance(model, Ensemble) else [model]
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "ensemble": isinstance(model, Ensemble),
           "meta": meta or {},
           "members": [_model_to_dict(m) for m in members]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> MLPModel | Ensemble:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a transdrop checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    members = [_model_from_dict(d) for d in doc["members"]]
    return Ensemble(members) if doc["ensemble"] else members[0]


def checkpoint_meta(path) -> dict:
    return json.loads(Path(path).read_text()).get("meta", {})
