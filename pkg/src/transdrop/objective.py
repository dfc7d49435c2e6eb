"""Data-fit losses, the transductive regulariser and the total training objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .autodiff import Node, Tape
from .inference import M_TRAIN, z_hat_node
from .network import MLPModel, forward


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 1.0
    l2: float = 1e-4
    m_train: int = M_TRAIN
    prob_clamp: float = 1e-6
    # weight of the concrete-dropout rate regulariser; None -> 2 / n_labelled
    concrete_reg: float | None = None

    def __post_init__(self):
        if self.lam < 0 or self.l2 < 0:
            raise ValueError("lam and l2 must be nonnegative")
        if not 0 < self.prob_clamp <= 0.01:
            raise ValueError("prob_clamp must lie in (0, 0.01]")
        if self.m_train < 2:
            raise ValueError("m_train must be at least 2")


class Batch(NamedTuple):
    """Standardised features with labels (``y``) or source/target flags (``z``)."""

    x: np.ndarray
    y: np.ndarray | None = None
    z: np.ndarray | None = None


def _session(model, tape, nodes):
    tape = tape if tape is not None else Tape()
    nodes = nodes if nodes is not None else model.bind(tape)
    return tape, nodes


def data_loss(model: MLPModel, batch: Batch, config: ObjectiveConfig | None = None,
              rng=None, mask_mode: str = "relaxed", tape=None, nodes=None) -> Node:
    """Mean squared error (regression) or mean binary cross-entropy.

    Uses a single stochastic pass. Labels may be soft (in [0, 1]) for
    classification, which the mixup baseline relies on.
    """
    config = config or ObjectiveConfig()
    if batch.y is None:
        raise ValueError("data_loss needs labels")
    y = np.asarray(batch.y, dtype=np.float64).reshape(-1, 1)
    if y.shape[0] == 0:
        raise ValueError("data_loss needs a nonempty batch")
    if np.any(np.isnan(y)):
        raise ValueError("data_loss got missing labels")
    tape, nodes = _session(model, tape, nodes)
    if not model.dropout.stochastic:
        mask_mode = "none"
    out, _ = forward(model, batch.x, mask_mode, rng, tape=tape, nodes=nodes, standardized=True)
    yn = tape.const(y)
    if model.spec.task == "regression":
        return tape.mean(tape.square(tape.sub(out, yn)))
    c = config.prob_clamp
    p = tape.clip(out, c, 1 - c)
    pos = tape.mul(yn, tape.log(p))
    neg = tape.mul(tape.const(1 - y), tape.log(tape.sub(tape.const(1.0), p)))
    return tape.mul(tape.const(-1.0), tape.mean(tape.add(pos, neg)))


def omega_from_scores(tape: Tape, zh: Node, z: np.ndarray, prob_clamp: float) -> Node:
    """Cross-entropy between scores ``zh`` (shape ``(1, n)``) and 0/1 flags ``z``.

    Returned as a positive sum so minimising it drives the scores toward the flags.
    """
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    zc = tape.clip(zh, prob_clamp, 1 - prob_clamp)
    tgt = tape.mul(tape.const(z), tape.log(zc))
    src = tape.mul(tape.const(1 - z), tape.log(tape.sub(tape.const(1.0), zc)))
    return tape.mul(tape.const(-1.0), tape.sum(tape.add(tgt, src)))


def transductive_omega(model: MLPModel, batch: Batch, m_train: int | None = None, rng=None,
                       config: ObjectiveConfig | None = None, tape=None, nodes=None,
                       mask_mode: str = "relaxed") -> Node:
    """Summed source/target cross-entropy of the variance-derived scores."""
    config = config or ObjectiveConfig()
    if batch.z is None:
        raise ValueError("transductive_omega needs source/target flags")
    tape, nodes = _session(model, tape, nodes)
    M = m_train or config.m_train
    if not model.dropout.stochastic:
        mask_mode = "none"
    zh = z_hat_node(model, tape, nodes, batch.x, M, rng, mask_mode)
    return omega_from_scores(tape, zh, batch.z, config.prob_clamp)


def l2_penalty(tape: Tape, nodes) -> Node:
    terms = [tape.sum(tape.square(n)) for name, n in nodes.items()
             if not name.startswith("drop_logit/")]
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return total


def concrete_penalty(model: MLPModel, tape: Tape, nodes, weight: float) -> Node:
    """Negative Bernoulli entropy of the learned layer rates, scaled by width."""
    eps = model.dropout.rate_clamp
    total = tape.const(0.0)
    for i, width in enumerate(model.spec.hidden_dims):
        p = tape.clip(tape.sigmoid(nodes[f"drop_logit/{i}"]), eps, 1 - eps)
        q = tape.sub(tape.const(1.0), p)
        negent = tape.add(tape.mul(p, tape.log(p)), tape.mul(q, tape.log(q)))
        total = tape.add(total, tape.mul(negent, tape.const(weight * width)))
    return total


class ObjectiveTerms(NamedTuple):
    total: Node
    data: Node
    omega: Node | None
    penalty: Node


def objective_terms(model: MLPModel, labelled: Batch, augmented: Batch | None,
                    config: ObjectiveConfig, rng, *, omega_scale: float | None = None,
                    n_labelled: int | None = None, data_mask_mode: str = "relaxed",
                    tape=None, nodes=None) -> ObjectiveTerms:
    """All terms of the objective on one tape.

    ``omega_scale`` multiplies the summed regulariser; it defaults to
    ``1 / len(augmented)`` (a per-point mean).
    """
    tape, nodes = _session(model, tape, nodes)
    data = data_loss(model, labelled, config, rng, data_mask_mode, tape, nodes)
    total = data
    omega = None
    if config.lam > 0 and augmented is not None and len(augmented.x):
        omega = transductive_omega(model, augmented, config.m_train, rng, config, tape, nodes)
        scale = omega_scale if omega_scale is not None else 1.0 / len(augmented.x)
        total = tape.add(total, tape.mul(omega, tape.const(config.lam * scale)))
    penalty = tape.mul(l2_penalty(tape, nodes), tape.const(config.l2))
    if model.dropout.kind == "concrete":
        w = config.concrete_reg
        if w is None:
            w = 2.0 / (n_labelled or len(labelled.x))
        penalty = tape.add(penalty, concrete_penalty(model, tape, nodes, w))
    total = tape.add(total, penalty)
    return ObjectiveTerms(total, data, omega, penalty)


def total_objective(model: MLPModel, labelled: Batch, augmented: Batch | None,
                    config: ObjectiveConfig, rng, tape=None, nodes=None, **kw) -> Node:
    return objective_terms(model, labelled, augmented, config, rng, tape=tape,
                           nodes=nodes, **kw).total
