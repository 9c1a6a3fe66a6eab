"""Mixture proposal, self-normalised importance weights and the MGS direction.

Everything stays in log space until the final normalisation: in thousands
of dimensions the raw Gaussian densities underflow to zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

ZERO, MLE = "zero", "mle"


class DegenerateProposalError(ValueError):
    """Noise variance is zero or the mixture weight is out of range."""


class WeightUnderflowError(FloatingPointError):
    """Every candidate's log weight is non-finite."""


@dataclass(frozen=True)
class ProposalConfig:
    """sigma2 is a scalar or a per-coordinate vector; pi weights the zero-mean component."""

    sigma2: float | np.ndarray
    pi: float = 0.5

    def __post_init__(self):
        s = np.asarray(self.sigma2, dtype=np.float64)
        if not np.all(s > 0) or not np.all(np.isfinite(s)):
            raise DegenerateProposalError("noise variance must be positive and finite")
        if not 0.0 <= self.pi <= 1.0:
            raise DegenerateProposalError("mixture weight pi must lie in [0, 1]")


@dataclass
class CandidateEvaluation:
    delta: np.ndarray
    component: str
    log_q: float
    cost: float = float("nan")
    weight: float = float("nan")
    nonfinite: bool = False


def noise_scale(grad: np.ndarray, mode: str = "global", slices: Mapping[str, slice] | None = None, noise: float = 1.0):
    """sigma^2 = noise * mean |grad|, over the whole vector or per named tensor.

    Returns a float in ``global`` mode and a ``{name: sigma2}`` dict in
    ``per_tensor`` mode.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.size == 0:
        raise ValueError("empty gradient")
    if mode == "global":
        s2 = noise * float(np.abs(grad).sum()) / grad.size
        if s2 <= 0:
            raise DegenerateProposalError("zero gradient gives zero noise variance")
        return s2
    if mode != "per_tensor":
        raise ValueError(f"unknown noise mode {mode!r}")
    if slices is None:
        raise ValueError("per_tensor mode needs the tensor layout")
    out = {}
    for name, s in slices.items():
        part = grad[s]
        out[name] = noise * float(np.abs(part).sum()) / part.size
        if out[name] <= 0:
            raise DegenerateProposalError(f"zero gradient on tensor {name!r}")
    return out


def expand_sigma2(sigma2, slices: Mapping[str, slice] | None = None, size: int | None = None) -> np.ndarray | float:
    """Turn a per-tensor ``{name: sigma2}`` map into a per-coordinate vector."""
    if not isinstance(sigma2, Mapping):
        return sigma2
    vec = np.empty(size if size is not None else max(s.stop for s in slices.values()))
    for name, s in slices.items():
        vec[s] = sigma2[name]
    return vec


def _gauss_logpdf(delta: np.ndarray, mean: np.ndarray | float, sigma2) -> float:
    s2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), delta.shape)
    diff = delta - mean
    return float(-0.5 * np.sum(diff * diff / s2) - 0.5 * np.sum(np.log(2.0 * np.pi * s2)))


def component_log_densities(delta: np.ndarray, mle_mean: np.ndarray, cfg: ProposalConfig) -> tuple[float, float]:
    return _gauss_logpdf(delta, 0.0, cfg.sigma2), _gauss_logpdf(delta, mle_mean, cfg.sigma2)


def mixture_log_density(delta: np.ndarray, mle_mean: np.ndarray, cfg: ProposalConfig) -> float:
    """log[pi N(delta|0, s2) + (1-pi) N(delta|mle_mean, s2)]."""
    delta = np.asarray(delta, dtype=np.float64)
    mle_mean = np.asarray(mle_mean, dtype=np.float64)
    if delta.shape != mle_mean.shape:
        raise ValueError("perturbation and MLE mean differ in shape")
    lz, lm = component_log_densities(delta, mle_mean, cfg)
    if cfg.pi == 1.0:
        return lz
    if cfg.pi == 0.0:
        return lm
    return float(np.logaddexp(np.log(cfg.pi) + lz, np.log1p(-cfg.pi) + lm))


def sample_proposal(mle_mean: np.ndarray, cfg: ProposalConfig, rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Draw one perturbation and report which mixture component produced it."""
    mle_mean = np.asarray(mle_mean, dtype=np.float64)
    component = ZERO if rng.random() < cfg.pi else MLE
    noise = rng.standard_normal(mle_mean.shape) * np.sqrt(cfg.sigma2)
    delta = noise if component == ZERO else mle_mean + noise
    return delta, component


def log_weights(base_cost: float, costs: Sequence[float], log_qs: Sequence[float], alpha: float) -> np.ndarray:
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    costs = np.asarray(costs, dtype=np.float64)
    log_qs = np.asarray(log_qs, dtype=np.float64)
    return alpha * (base_cost - costs) - log_qs


def candidate_weights(base_cost: float, costs: Sequence[float], log_qs: Sequence[float], alpha: float) -> np.ndarray:
    """Normalised w_k proportional to exp(alpha (C(theta) - C(theta + delta_k))) / q(delta_k)."""
    if len(costs) == 0:
        raise ValueError("need at least one candidate")
    lw = log_weights(base_cost, costs, log_qs, alpha)
    if not np.any(np.isfinite(lw)):
        raise WeightUnderflowError("all candidate weights are non-finite; check alpha and the noise level")
    lw = np.where(np.isfinite(lw), lw, -np.inf)
    return np.exp(lw - logsumexp(lw))


def combine(deltas: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted sum of the candidate directions."""
    out = np.zeros_like(np.asarray(deltas[0], dtype=np.float64))
    for w, d in zip(weights, deltas):
        out += w * d
    return out


def snis_variance(deltas: Sequence[np.ndarray], weights: Sequence[float], combined: np.ndarray) -> np.ndarray:
    out = np.zeros_like(combined)
    for w, d in zip(weights, deltas):
        diff = d - combined
        out += w * diff * diff
    return out
