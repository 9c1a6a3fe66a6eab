"""Sequence-level task losses, the pooled batch cost and evaluation metrics.

eos is stripped before string comparisons (edit distance, BLEU, repetition)
and kept for the LM loss, which prices termination.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .decoding import DecodeOutput
from .model import Example, ModelParams, eos_index, sequence_log_probs


def strip_eos(tokens: Sequence[int], eos: int) -> tuple[int, ...]:
    tokens = tuple(tokens)
    return tokens[:-1] if tokens and tokens[-1] == eos else tokens


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Unit-cost edit distance (Wagner-Fischer, two rows)."""
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def edit_loss(hyp: Sequence[int], ref: Sequence[int], eos: int | None = None) -> float:
    """Levenshtein distance divided by the reference length.

    An empty reference (target was eos alone) divides by 1, so the loss is
    the hypothesis length.
    """
    if eos is not None:
        hyp, ref = strip_eos(hyp, eos), strip_eos(ref, eos)
    return levenshtein(hyp, ref) / max(len(ref), 1)


def _ngrams(tokens: Sequence[int], n: int) -> list[tuple[int, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def sentence_bleu(hyp: Sequence[int], ref: Sequence[int], max_order: int = 4, eos: int | None = None) -> float:
    """Sentence BLEU with add-one smoothing on orders >= 2.

    Order-1 precision is unsmoothed, so a hypothesis sharing no token with
    the reference scores exactly 0. Against an empty reference only the
    empty hypothesis scores 1.
    """
    if eos is not None:
        hyp, ref = strip_eos(hyp, eos), strip_eos(ref, eos)
    if len(ref) == 0:
        return 1.0 if len(hyp) == 0 else 0.0
    if len(hyp) == 0:
        return 0.0
    log_prec = 0.0
    for n in range(1, max_order + 1):
        h, r = Counter(_ngrams(hyp, n)), Counter(_ngrams(ref, n))
        match = sum(min(c, r[g]) for g, c in h.items())
        total = max(len(hyp) - n + 1, 0)
        if n > 1:
            match, total = match + 1, total + 1
        if match == 0:
            return 0.0
        log_prec += math.log(match / total)
    bp = 1.0 if len(hyp) > len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(log_prec / max_order)


def repetition(tokens: Sequence[int], n: int = 4) -> float:
    """1 - |unique n-grams| / |n-grams|; 0 for sequences shorter than n."""
    grams = _ngrams(tokens, n)
    if not grams:
        return 0.0
    return 1.0 - len(set(grams)) / len(grams)


def nonterm(decode: DecodeOutput) -> int:
    return 0 if decode.terminated else 1


def lm_loss(score_params: ModelParams, hyp: Sequence[int], X: Sequence[int]) -> float:
    """Total negative log-probability of ``hyp`` (eos included if present)."""
    return float(-sequence_log_probs(score_params, [X], [hyp])[0])


@dataclass(frozen=True)
class TaskLoss:
    """c(Y_hat, Y): ``lm`` (frozen scorer NLL), ``edit`` or ``sbleu`` (1 - BLEU)."""

    kind: str
    score_params: ModelParams | None = None
    ngram_order: int = 4

    def __post_init__(self):
        if self.kind not in ("lm", "edit", "sbleu"):
            raise ValueError(f"unknown task loss {self.kind!r}")
        if self.kind == "lm" and self.score_params is None:
            raise ValueError("lm loss needs frozen scoring parameters")

    def batch(self, decodes: Sequence[DecodeOutput], examples: Sequence[Example], eos: int) -> np.ndarray:
        """Per-example losses for decoded outputs against their examples."""
        if self.kind == "lm":
            return -sequence_log_probs(self.score_params, [e.X for e in examples], [d.tokens for d in decodes])
        if self.kind == "edit":
            return np.array([edit_loss(d.tokens, e.Y, eos) for d, e in zip(decodes, examples)])
        return np.array(
            [1.0 - sentence_bleu(d.tokens, e.Y, self.ngram_order, eos) for d, e in zip(decodes, examples)]
        )

    def sequences(self, hyps: Sequence[Sequence[int]], example: Example, eos: int) -> np.ndarray:
        """Losses of raw token sequences against one example."""
        outs = [DecodeOutput(tuple(h), bool(h) and h[-1] == eos, ()) for h in hyps]
        return self.batch(outs, [example] * len(outs), eos)


def pooled_cost(
    params: ModelParams,
    batch: Sequence[Example],
    decoder: Callable[[ModelParams, Sequence[Example]], list[DecodeOutput]],
    loss: TaskLoss,
) -> float:
    """Mean task loss of the batch decoded at ``params``."""
    return pooled_cost_detail(params, batch, decoder, loss)[0]


def pooled_cost_detail(params, batch, decoder, loss):
    if not batch:
        raise ValueError("empty batch")
    decodes = decoder(params, batch)
    losses = loss.batch(decodes, batch, eos_index(params.config))
    return float(np.mean(losses)), decodes, losses
