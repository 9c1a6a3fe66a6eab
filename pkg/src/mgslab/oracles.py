"""Brute-force and closed-form references for the estimators.

These are deliberately naive: exhaustive enumeration of every output
sequence on tiny vocabularies, dense grid quadrature for the MGS target
direction, and the MRT gradient assembled term by term from per-sequence
score functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .losses import TaskLoss
from .model import DecoderState, Example, ModelParams, eos_index, graph_value_and_grad, sequence_log_probs_graph


class EnumerationBoundError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationSpec:
    vocab_size: int
    max_len: int
    include_unterminated: bool = True

    def __post_init__(self):
        if not 1 <= self.vocab_size <= 4 or not 1 <= self.max_len <= 5:
            raise EnumerationBoundError("enumeration limited to vocab_size <= 4 and max_len <= 5")
        if self.count() > 10**6:
            raise EnumerationBoundError("too many sequences to enumerate")

    def count(self) -> int:
        content = self.vocab_size - 1
        return sum(content**k for k in range(self.max_len)) + content**self.max_len


def enumerate_sequences(params: ModelParams, X: Sequence[int], spec: EnumerationSpec):
    """Every output up to ``max_len`` with its probability.

    Returns ``[(tokens, prob, terminated)]``.  Unterminated entries are the
    length-capped prefixes; each carries the full mass of its subtree, so
    the probabilities sum to one.
    """
    if spec.vocab_size != params.config.vocab_size:
        raise ValueError("enumeration vocabulary differs from the model's")
    eos = eos_index(params.config)
    out = []
    state = DecoderState(params, [X])
    prefixes, logps, h = [()], np.zeros(1), state.h
    prev = np.array([eos])
    for depth in range(1, spec.max_len + 1):
        state.h = h
        step = state.step(prev)
        nxt, nxt_lp, rows, toks = [], [], [], []
        for i, prefix in enumerate(prefixes):
            for tok in range(spec.vocab_size):
                seq, lp = prefix + (tok,), logps[i] + step[i, tok]
                if tok == eos:
                    out.append((seq, float(np.exp(lp)), True))
                elif depth == spec.max_len:
                    if spec.include_unterminated:
                        out.append((seq, float(np.exp(lp)), False))
                else:
                    nxt.append(seq)
                    nxt_lp.append(lp)
                    rows.append(i)
                    toks.append(tok)
        if not nxt:
            break
        h = state.h[rows]
        prefixes, logps, prev = nxt, np.array(nxt_lp), np.array(toks)
    return out


def exact_expected_cost(params, X, Y, loss: TaskLoss, spec: EnumerationSpec) -> float:
    seqs = enumerate_sequences(params, X, spec)
    costs = loss.sequences([s for s, _, _ in seqs], Example(X, Y), eos_index(params.config))
    return float(sum(p * c for (_, p, _), c in zip(seqs, costs)))


def exact_pg_gradient(params, X, Y, loss: TaskLoss, spec: EnumerationSpec) -> np.ndarray:
    """sum over all outputs of p(Y_hat) c(Y_hat, Y) grad log p(Y_hat)."""
    seqs = enumerate_sequences(params, X, spec)
    tokens = [s for s, _, _ in seqs]
    costs = loss.sequences(tokens, Example(X, Y), eos_index(params.config))
    coef = np.array([p for _, p, _ in seqs]) * costs
    fn = lambda p: (sequence_log_probs_graph(p, params.config, [X] * len(tokens), tokens) * coef).sum()
    return graph_value_and_grad(params, fn)[1]


def score_functions(params: ModelParams, X, seqs) -> tuple[np.ndarray, np.ndarray]:
    """log p(Y|X) and grad log p(Y|X) for each sequence, one backward pass each."""
    lps, grads = [], []
    for s in seqs:
        lp, g = graph_value_and_grad(params, lambda p: sequence_log_probs_graph(p, params.config, [X], [s]).sum())
        lps.append(lp)
        grads.append(g)
    return np.array(lps), np.array(grads)


def mrt_gradient_oracle(params: ModelParams, X, Y, S, alpha: float, loss: TaskLoss) -> np.ndarray:
    """alpha * (E_q[c grad log p] - E_q[c] E_q[grad log p]) over the set S."""
    S = [tuple(s) for s in S]
    if not S:
        raise ValueError("empty candidate set")
    costs = loss.sequences(S, Example(X, Y), eos_index(params.config))
    lps, grads = score_functions(params, X, S)
    q = np.exp(alpha * lps - logsumexp(alpha * lps))
    e_cg = (q * costs) @ grads
    e_c = float(q @ costs)
    e_g = q @ grads
    return alpha * (e_cg - e_c * e_g)


def mrt_gradient_gold_split(params: ModelParams, X, Y, S, alpha: float, loss: TaskLoss) -> np.ndarray:
    """Same gradient written as alpha [(w(Y*) - wbar(Y*)) g(Y*) + sum_{S minus Y*} (w - wbar) g].

    w(Y') = c(Y') q(Y') and wbar(Y') = E_q[c] q(Y').  Requires the gold
    sequence in S.
    """
    S = [tuple(s) for s in S]
    gold = tuple(Y)
    if gold not in S:
        raise ValueError("gold sequence not in the candidate set")
    costs = loss.sequences(S, Example(X, Y), eos_index(params.config))
    lps, grads = score_functions(params, X, S)
    q = np.exp(alpha * lps - logsumexp(alpha * lps))
    e_c = float(q @ costs)
    w, wbar = costs * q, e_c * q
    g_star = S.index(gold)
    total = (w[g_star] - wbar[g_star]) * grads[g_star]
    for i in range(len(S)):
        if i != g_star:
            total = total + (w[i] - wbar[i]) * grads[i]
    return alpha * total


def _grid_target(cost_fn, theta, alpha, lo, hi, n):
    xs = np.linspace(lo[0], hi[0], n)
    ys = np.linspace(lo[1], hi[1], n)
    dx, dy = np.meshgrid(xs, ys, indexing="ij")
    base = cost_fn(theta)
    logp = alpha * (base - cost_fn(np.stack([theta[0] + dx, theta[1] + dy])))
    w = np.exp(logp - logsumexp(logp))
    return np.array([np.sum(w * dx), np.sum(w * dy)])


def exact_mgs_target(
    cost_fn: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    alpha: float,
    mle_mean: np.ndarray,
    sigma2: float,
    n: int = 401,
    tol: float = 5e-3,
) -> np.ndarray:
    """E[delta] under p*(delta) proportional to exp(alpha (C(theta) - C(theta + delta))).

    ``cost_fn`` maps an array of shape (2, ...) to costs of shape (...).
    The integral runs over the box spanning +/-6 sigma around both proposal
    means (the target restricted to where the proposal lives), by a uniform
    grid; the grid is refined 2x and a relative shift above ``tol`` raises.
    """
    theta = np.asarray(theta, dtype=np.float64)
    mle_mean = np.asarray(mle_mean, dtype=np.float64)
    sd = np.sqrt(sigma2)
    lo = np.minimum(0.0, mle_mean) - 6 * sd
    hi = np.maximum(0.0, mle_mean) + 6 * sd
    coarse = _grid_target(cost_fn, theta, alpha, lo, hi, n)
    fine = _grid_target(cost_fn, theta, alpha, lo, hi, 2 * n - 1)
    scale = max(np.linalg.norm(fine), sd * 1e-6)
    if np.linalg.norm(fine - coarse) / scale > tol:
        raise QuadratureError(f"grid refinement moved the target by more than {tol:.1%}")
    return fine
