"""MLE, MGS, policy-gradient and minimum-risk training steps.

Every step is a pure function of ``(params, batch, config, seed, state)``:
randomness comes from counter-based substreams keyed by
``(seed, step, purpose, ...)`` and nothing is mutated in place.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import sampler
from .autodiff import NonFiniteError
from .decoding import Decoder, NoiseStream, decode_ancestral_batch, decode_greedy_batch, train_max_len
from .losses import TaskLoss, pooled_cost_detail
from .model import (
    Example,
    ModelParams,
    apply_perturbation,
    clip_gradient,
    eos_index,
    graph_value_and_grad,
    nll_and_grad,
    sequence_log_probs_graph,
)

ALGORITHMS = ("mle", "mgs", "pg", "mrt")
MRT_CANDIDATES = ("samples", "samples+greedy", "samples+gold", "samples+greedy+gold")
ABLATIONS = ("mgs", "zero_only", "mle_only")

# substream purposes
_MIX, _CANDIDATE, _SAMPLE, _DECODE = 0, 1, 2, 3


class DegenerateCandidateSetError(ValueError):
    """Every MRT candidate set collapsed to a single sequence."""


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "mle"
    K: int = 4
    alpha: float = 1.0
    pi: float = 0.5
    noise_mode: str = "per_tensor"
    noise: float = 1.0
    mix_rate: float = 1.0
    mrt_candidates: str = "samples"
    ema_decay: float = 0.9
    step_size: float = 1e-2
    mgs_step_size: float = 1.0
    mgs_through_optimizer: bool = False
    clip_norm: float = 1.0
    proposal_ablation: str = "mgs"
    optimizer: str = "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.pi <= 1.0:
            raise ValueError("pi must lie in [0, 1]")
        if not 0.0 <= self.mix_rate <= 1.0:
            raise ValueError("mix_rate must lie in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.step_size <= 0 or self.clip_norm <= 0:
            raise ValueError("step_size and clip_norm must be positive")
        if self.noise_mode not in ("global", "per_tensor"):
            raise ValueError("noise_mode must be global or per_tensor")
        if self.mrt_candidates not in MRT_CANDIDATES:
            raise ValueError(f"mrt_candidates must be one of {MRT_CANDIDATES}")
        if self.proposal_ablation not in ABLATIONS:
            raise ValueError(f"proposal_ablation must be one of {ABLATIONS}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be sgd or adam")


@dataclass
class TrainerState:
    """Driver-owned mutable state: step counter, EMA baseline, Adam moments."""

    step: int = 0
    baseline: float | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    adam_t: int = 0

    def copy(self) -> "TrainerState":
        return TrainerState(
            self.step,
            self.baseline,
            None if self.adam_m is None else self.adam_m.copy(),
            None if self.adam_v is None else self.adam_v.copy(),
            self.adam_t,
        )


@dataclass
class StepDiagnostics:
    kind: str
    pooled_cost_before: float | None = None
    weights: list[float] = field(default_factory=list)
    weight_stddev: float | None = None
    mle_component_total_weight: float | None = None
    highest_weight_component: str | None = None
    underflow_flag: bool = False
    components: list[str] = field(default_factory=list)
    candidate_costs: list[float] = field(default_factory=list)
    log_q: list[float] = field(default_factory=list)
    sigma2_mean: float | None = None
    nll: float | None = None
    grad_norm: float | None = None
    mean_sample_cost: float | None = None
    baseline: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def substream(seed: int, step: int, *tags: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, step, *tags])))


def _descend(params: ModelParams, grad: np.ndarray, cfg: TrainerConfig, state: TrainerState) -> tuple[ModelParams, TrainerState]:
    """One optimiser step along -grad; returns fresh params and state."""
    state = state.copy()
    if cfg.optimizer == "sgd":
        return apply_perturbation(params, -cfg.step_size * grad), state
    if state.adam_m is None:
        state.adam_m = np.zeros_like(grad)
        state.adam_v = np.zeros_like(grad)
    state.adam_t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    state.adam_m = b1 * state.adam_m + (1 - b1) * grad
    state.adam_v = b2 * state.adam_v + (1 - b2) * grad * grad
    m_hat = state.adam_m / (1 - b1**state.adam_t)
    v_hat = state.adam_v / (1 - b2**state.adam_t)
    return apply_perturbation(params, -cfg.step_size * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)), state


def clipped_mle_gradient(params: ModelParams, batch: Sequence[Example], clip_norm: float) -> tuple[float, np.ndarray, float]:
    value, grad = nll_and_grad(params, batch)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite MLE gradient")
    return value, clip_gradient(grad, clip_norm), float(np.linalg.norm(grad))


def mle_step(params, batch, cfg: TrainerConfig, state: TrainerState | None = None):
    state = state or TrainerState()
    value, grad, norm = clipped_mle_gradient(params, batch, cfg.clip_norm)
    new, state = _descend(params, grad, cfg, state)
    state.step += 1
    return new, StepDiagnostics("mle", nll=value, grad_norm=norm), state


# MGS -----------------------------------------------------------------------


def _ablation_pi(cfg: TrainerConfig) -> float:
    return {"mgs": cfg.pi, "zero_only": 1.0, "mle_only": 0.0}[cfg.proposal_ablation]


def sentinel_cost(base_cost: float, alpha: float) -> float:
    """Cost given to a candidate whose decode blew up: weight factor e^-10."""
    return base_cost + 10.0 / alpha if alpha > 0 else base_cost


def mgs_candidates(params, batch, cfg: TrainerConfig, loss: TaskLoss, decoder: Decoder, seed: int, step: int):
    """Algorithm body: base cost, proposal, K evaluated candidates.

    Returns ``(base_cost, candidates, nll, grad_norm, sigma2)``; candidate
    weights are filled in.
    """
    dec = decoder.with_noise(seed, step, _DECODE) if decoder.kind == "ancestral" else decoder
    if decoder.max_len is None:
        dec = replace(dec, max_len=train_max_len(batch))
    base_cost = pooled_cost_detail(params, batch, dec, loss)[0]
    value, grad, norm = clipped_mle_gradient(params, batch, cfg.clip_norm)
    mle_mean = -cfg.step_size * grad
    s2 = sampler.noise_scale(grad, cfg.noise_mode, params.slices, cfg.noise)
    s2 = sampler.expand_sigma2(s2, params.slices, len(params))
    proposal = sampler.ProposalConfig(s2, _ablation_pi(cfg))

    def evaluate(k: int) -> sampler.CandidateEvaluation:
        delta, comp = sampler.sample_proposal(mle_mean, proposal, substream(seed, step, _CANDIDATE, k))
        cand = sampler.CandidateEvaluation(delta, comp, sampler.mixture_log_density(delta, mle_mean, proposal))
        try:
            cand.cost = pooled_cost_detail(apply_perturbation(params, delta), batch, dec, loss)[0]
        except NonFiniteError:
            cand.cost, cand.nonfinite = sentinel_cost(base_cost, cfg.alpha), True
        return cand

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            cands = list(pool.map(evaluate, range(cfg.K)))
    else:
        cands = [evaluate(k) for k in range(cfg.K)]
    weights = sampler.candidate_weights(base_cost, [c.cost for c in cands], [c.log_q for c in cands], cfg.alpha)
    for c, w in zip(cands, weights):
        c.weight = float(w)
    return base_cost, cands, value, norm, s2


def mgs_step(params, batch, cfg: TrainerConfig, loss: TaskLoss, decoder: Decoder, seed: int, state: TrainerState | None = None):
    state = state or TrainerState()
    base, cands, value, norm, s2 = mgs_candidates(params, batch, cfg, loss, decoder, seed, state.step)
    weights = np.array([c.weight for c in cands])
    direction = sampler.combine([c.delta for c in cands], weights)
    if cfg.mgs_through_optimizer:
        new, state = _descend(params, -direction, cfg, state)
    else:
        new, state = apply_perturbation(params, cfg.mgs_step_size * direction), state.copy()
    state.step += 1
    comps = [c.component for c in cands]
    diag = StepDiagnostics(
        "mgs",
        pooled_cost_before=base,
        weights=weights.tolist(),
        weight_stddev=float(np.std(weights)),
        mle_component_total_weight=float(sum(w for w, c in zip(weights, comps) if c == sampler.MLE)),
        highest_weight_component=comps[int(np.argmax(weights))],
        underflow_flag=any(c.nonfinite for c in cands),
        components=comps,
        candidate_costs=[c.cost for c in cands],
        log_q=[c.log_q for c in cands],
        sigma2_mean=float(np.mean(s2)),
        nll=value,
        grad_norm=norm,
    )
    return new, diag, state


# policy gradient -------------------------------------------------------------


def sample_sequences(params, examples: Sequence[Example], K: int, seed: int, step: int, max_len: int):
    """K ancestral samples per example, grouped as ``[[seq]*K]*N``."""
    Xs = [e.X for e in examples for _ in range(K)]
    noises = [NoiseStream((seed, step, _SAMPLE, n, k)) for n in range(len(examples)) for k in range(K)]
    outs = decode_ancestral_batch(params, Xs, noises, max_len)
    return [outs[n * K : (n + 1) * K] for n in range(len(examples))]


def pg_surrogate(p, config, Xs, seqs, advantages) -> ad.Tensor:
    """(1/M) sum_m advantage_m log p(seq_m | X_m); its gradient is the PG estimate."""
    logp = sequence_log_probs_graph(p, config, Xs, seqs)
    return (logp * np.asarray(advantages, dtype=np.float64)).sum() * (1.0 / len(seqs))


def pg_gradient(params: ModelParams, Xs, seqs, costs, baseline: float = 0.0) -> np.ndarray:
    adv = np.asarray(costs, dtype=np.float64) - baseline
    return graph_value_and_grad(params, lambda p: pg_surrogate(p, params.config, Xs, seqs, adv))[1]


def pg_step(params, batch, cfg: TrainerConfig, loss: TaskLoss, seed: int, state: TrainerState | None = None):
    state = state or TrainerState()
    eos = eos_index(params.config)
    groups = sample_sequences(params, batch, cfg.K, seed, state.step, train_max_len(batch))
    Xs, seqs, costs = [], [], []
    for ex, outs in zip(batch, groups):
        Xs += [ex.X] * len(outs)
        seqs += [o.tokens for o in outs]
        costs.append(loss.batch(outs, [ex] * len(outs), eos))
    costs = np.concatenate(costs)
    baseline = float(np.mean(costs)) if state.baseline is None else state.baseline
    grad = pg_gradient(params, Xs, seqs, costs, baseline)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite policy gradient")
    norm = float(np.linalg.norm(grad))
    new, state = _descend(params, clip_gradient(grad, cfg.clip_norm), cfg, state)
    state.baseline = cfg.ema_decay * baseline + (1 - cfg.ema_decay) * float(np.mean(costs))
    state.step += 1
    return new, StepDiagnostics("pg", grad_norm=norm, mean_sample_cost=float(np.mean(costs)), baseline=baseline), state


# minimum risk training -----------------------------------------------------------


def dedupe(seqs: Sequence[Sequence[int]]) -> list[tuple[int, ...]]:
    seen, out = set(), []
    for s in seqs:
        s = tuple(s)
        if s not in seen:
            seen.add(s)
            out.append(s)
    return out


def mrt_candidate_set(params, example: Example, samples: Sequence[Sequence[int]], strategy: str, max_len: int) -> list[tuple[int, ...]]:
    cands = list(samples)
    if "greedy" in strategy:
        cands.append(decode_greedy_batch(params, [example.X], max_len)[0].tokens)
    if "gold" in strategy:
        cands.append(example.Y)
    return dedupe(cands)


def mrt_objective(p, config, items, alpha: float) -> ad.Tensor:
    """Mean over examples of sum_S q(Y|X,S) c(Y), q proportional to p(Y|X)^alpha on S.

    ``items`` is a list of ``(X, S, costs)``.
    """
    Xs = [X for X, S, _ in items for _ in S]
    seqs = [s for _, S, _ in items for s in S]
    logp = sequence_log_probs_graph(p, config, Xs, seqs)
    total, start = None, 0
    for _, S, costs in items:
        seg = logp[start : start + len(S)]
        start += len(S)
        q = (seg * alpha).softmax()
        term = (q * np.asarray(costs, dtype=np.float64)).sum()
        total = term if total is None else total + term
    return total * (1.0 / len(items))


def mrt_gradient(params: ModelParams, items, alpha: float) -> tuple[float, np.ndarray]:
    return graph_value_and_grad(params, lambda p: mrt_objective(p, params.config, items, alpha))


def mrt_step(params, batch, cfg: TrainerConfig, loss: TaskLoss, seed: int, state: TrainerState | None = None):
    state = state or TrainerState()
    eos = eos_index(params.config)
    cap = train_max_len(batch)
    groups = sample_sequences(params, batch, cfg.K, seed, state.step, cap)
    items, collapsed = [], 0
    for ex, outs in zip(batch, groups):
        S = mrt_candidate_set(params, ex, [o.tokens for o in outs], cfg.mrt_candidates, cap)
        if len(S) < 2:
            # a one-sequence set has zero gradient; keep it out of the graph
            collapsed += 1
            continue
        items.append((ex.X, S, loss.sequences(S, ex, eos)))
    if not items:
        raise DegenerateCandidateSetError("every candidate set collapsed to one sequence")
    value, grad = mrt_gradient(params, items, cfg.alpha)
    # collapsed examples count in the batch mean with zero contribution
    grad = grad * (len(items) / len(batch))
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite MRT gradient")
    norm = float(np.linalg.norm(grad))
    new, state = _descend(params, clip_gradient(grad, cfg.clip_norm), cfg, state)
    state.step += 1
    return new, StepDiagnostics("mrt", grad_norm=norm, mean_sample_cost=value), state


# dispatch ------------------------------------------------------------------------


def use_sequence_step(cfg: TrainerConfig, seed: int, step: int) -> bool:
    """z ~ Bernoulli(mix_rate); True means the sequence-level step runs."""
    if cfg.algorithm == "mle":
        return False
    return bool(substream(seed, step, _MIX).random() < cfg.mix_rate)


def mixed_step(params, batch, cfg: TrainerConfig, seed: int, state: TrainerState | None = None, loss: TaskLoss | None = None, decoder: Decoder | None = None):
    """Run the configured sequence-level step with probability mix_rate, else MLE."""
    state = state or TrainerState()
    if not use_sequence_step(cfg, seed, state.step):
        return mle_step(params, batch, cfg, state)
    if cfg.algorithm == "mgs":
        return mgs_step(params, batch, cfg, loss, decoder or Decoder("greedy"), seed, state)
    if cfg.algorithm == "pg":
        return pg_step(params, batch, cfg, loss, seed, state)
    return mrt_step(params, batch, cfg, loss, seed, state)
