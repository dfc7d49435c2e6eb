"""Monte Carlo predictive sampling and the variance-to-confidence map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node, Tape
from .network import Ensemble, MLPModel, forward

M_TRAIN = 32
M_EVAL = 200


@dataclass(frozen=True)
class PredictiveSummary:
    mean: float
    variance: float
    sd: float
    interval_lo: float
    interval_hi: float
    m_samples: int


def mc_predict(model: MLPModel | Ensemble, x, M: int = M_EVAL, rng=None,
               mask_mode: str = "sampled") -> np.ndarray:
    """Draw ``M`` stochastic forward passes; returns an ``(M, n)`` array.

    All passes run as one stacked batch. For an :class:`Ensemble` the samples
    are the member predictions, so the leading axis has one row per member
    and ``M`` only needs to satisfy the same precondition.
    """
    if M < 2:
        raise ValueError("mc_predict needs M >= 2 samples to define a variance")
    if isinstance(model, Ensemble):
        return np.stack([forward(m, x, "none")[0].value[:, 0] for m in model.members])
    xs = model.standardize(x)
    n = xs.shape[0]
    if not model.dropout.stochastic:
        out, _ = forward(model, xs, "none", standardized=True)
        return np.tile(out.value[:, 0], (M, 1))
    if rng is None:
        raise ValueError("stochastic prediction needs an rng")
    out, _ = forward(model, np.tile(xs, (M, 1)), mask_mode, rng, standardized=True)
    return out.value[:, 0].reshape(M, n).copy()


def summarize(samples) -> PredictiveSummary:
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("summarize needs at least two samples")
    mean = float(s.mean())
    var = float(np.mean((s - mean) ** 2))
    lo, hi = np.percentile(s, [2.5, 97.5])
    return PredictiveSummary(mean, var, float(np.sqrt(var)), float(lo), float(hi), s.size)


def _column_variance(s: np.ndarray) -> np.ndarray:
    # shifting by the first row keeps constant columns at exactly zero
    d = s - s[0]
    return np.mean((d - d.mean(axis=0)) ** 2, axis=0)


def summarize_columns(samples: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorised :func:`summarize` over the columns of an ``(M, n)`` array."""
    s = np.asarray(samples, dtype=np.float64)
    mean = s.mean(axis=0)
    var = _column_variance(s)
    lo, hi = np.percentile(s, [2.5, 97.5], axis=0)
    return {"mean": mean, "variance": var, "sd": np.sqrt(var), "lo": lo, "hi": hi}


def g_map(variance):
    """1 - 1/(1 + v): maps a variance onto [0, 1)."""
    v = np.asarray(variance, dtype=np.float64)
    if np.any(v < 0):
        raise ValueError("g_map is defined for nonnegative variances only")
    out = v / (1.0 + v)
    return float(out) if out.ndim == 0 else out


def z_hat(model, x, M: int = M_EVAL, rng=None) -> np.ndarray:
    """Source/target score from the predictive variance, one per row of ``x``."""
    samples = mc_predict(model, x, M, rng)
    return g_map(_column_variance(samples))


def variance_node(tape: Tape, samples: Node) -> Node:
    """Population variance over axis 0 of an ``(M, n)`` node; returns ``(1, n)``."""
    mean = tape.mean(samples, axis=0, keepdims=True)
    dev = tape.sub(samples, tape.broadcast(mean, samples.shape))
    return tape.mean(tape.square(dev), axis=0, keepdims=True)


def g_node(tape: Tape, v: Node) -> Node:
    # v / (1 + v) rather than 1 - 1/(1 + v): no cancellation for small v,
    # where log(z_hat) in the regulariser is most sensitive
    return tape.mul(v, tape.reciprocal(tape.add(v, tape.const(1.0))))


def z_hat_node(model: MLPModel, tape: Tape, nodes, xs: np.ndarray, M: int, rng,
               mask_mode: str = "relaxed") -> Node:
    """Differentiable score for standardised rows ``xs``; returns a ``(1, n)`` node."""
    if M < 2:
        raise ValueError("z_hat needs M >= 2 samples")
    n = xs.shape[0]
    out, _ = forward(model, np.tile(xs, (M, 1)), mask_mode, rng, tape=tape, nodes=nodes,
                     standardized=True)
    samples = tape.reshape(out, (M, n))
    return g_node(tape, variance_node(tape, samples))
