"""Greedy, ancestral and beam decoding.

Ancestral sampling is written as a deterministic function of an explicit
uniform noise stream: token ``t`` is the inverse-CDF image (in token-index
order) of the ``t``-th draw, so ``(params, X, seed)`` fixes the output.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import DecoderState, Example, ModelParams, eos_index


@dataclass(frozen=True)
class DecodeOutput:
    tokens: tuple[int, ...]
    terminated: bool
    step_log_probs: tuple[float, ...]

    @property
    def log_prob(self) -> float:
        return float(sum(self.step_log_probs))


class NoiseStream:
    """Reproducible stream of uniform(0, 1) draws.

    ``seed`` may be an int or a tuple of ints naming a substream, e.g.
    ``(run_seed, step, example)``.  Backed by the counter-based Philox
    generator so substreams are independent.
    """

    _CHUNK = 64

    def __init__(self, seed):
        self.seed = seed
        key = list(seed) if isinstance(seed, (tuple, list)) else [seed]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))
        self._buf = np.empty(0)
        self.cursor = 0

    def next(self) -> float:
        pos = self.cursor % self._CHUNK
        if pos == 0:
            self._buf = self._gen.random(self._CHUNK)
        self.cursor += 1
        return float(self._buf[pos])


def train_max_len(batch: Sequence[Example]) -> int:
    """ceil(1.3 x longest target), in exact integer arithmetic."""
    longest = max(len(e.Y) for e in batch)
    return -(-13 * longest // 10)


def _finish(tokens, logps, eos, n):
    out = []
    for i in range(n):
        toks = tuple(tokens[i])
        out.append(DecodeOutput(toks, bool(toks) and toks[-1] == eos, tuple(logps[i])))
    return out


def _run(params: ModelParams, Xs, max_len: int, choose) -> list[DecodeOutput]:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    eos = eos_index(params.config)
    n = len(Xs)
    state = DecoderState(params, Xs)
    tokens = [[] for _ in range(n)]
    logps = [[] for _ in range(n)]
    active = np.arange(n)
    prev = np.full(n, eos)
    for _ in range(max_len):
        logp = state.step(prev[active], rows=active)
        picks = choose(logp, active)
        for row, tok, lp in zip(active, picks, logp[np.arange(len(active)), picks]):
            tokens[row].append(int(tok))
            logps[row].append(float(lp))
        prev[active] = picks
        active = active[picks != eos]
        if active.size == 0:
            break
    return _finish(tokens, logps, eos, n)


def decode_greedy_batch(params: ModelParams, Xs: Sequence[Sequence[int]], max_len: int) -> list[DecodeOutput]:
    # np.argmax returns the first maximum: ties go to the lowest index
    return _run(params, Xs, max_len, lambda logp, rows: np.argmax(logp, axis=1))


def decode_greedy(params: ModelParams, X: Sequence[int], max_len: int) -> DecodeOutput:
    return decode_greedy_batch(params, [X], max_len)[0]


def inverse_cdf(probs: np.ndarray, u: float) -> int:
    """Smallest index whose cumulative probability exceeds ``u``."""
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= probs.size:
        # u beyond the rounded total mass: last token with nonzero mass
        idx = int(np.flatnonzero(probs > 0)[-1])
    return idx


def decode_ancestral_batch(params: ModelParams, Xs: Sequence[Sequence[int]], noises: Sequence[NoiseStream], max_len: int) -> list[DecodeOutput]:
    if len(noises) != len(Xs):
        raise ValueError("need one noise stream per input")

    def choose(logp, rows):
        probs = np.exp(logp)
        return np.array([inverse_cdf(probs[j], noises[r].next()) for j, r in enumerate(rows)], dtype=np.int64)

    return _run(params, Xs, max_len, choose)


def decode_ancestral(params: ModelParams, X: Sequence[int], noise: NoiseStream, max_len: int) -> DecodeOutput:
    return decode_ancestral_batch(params, [X], [noise], max_len)[0]


def decode_beam(params: ModelParams, X: Sequence[int], width: int, max_len: int) -> DecodeOutput:
    """Length-normalised beam search.

    A hypothesis ending in eos leaves the beam and the beam shrinks by one
    slot, so ``width=1`` is exactly greedy.  Hypotheses alive at ``max_len``
    are finalised unterminated.  The winner maximises total log-prob divided
    by length (eos counted); ties keep the earliest-finalised hypothesis.
    """
    if width < 1:
        raise ValueError("beam width must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    eos = eos_index(params.config)
    state = DecoderState(params, [X])
    h = state.h
    live = [((), (), 0.0)]  # tokens, step log-probs, total
    prev = np.array([eos])
    finished: list[tuple[float, DecodeOutput]] = []
    for t in range(max_len):
        state.h = h
        logp = state.step(prev)
        h_all = state.h
        totals = np.array([hyp[2] for hyp in live])[:, None] + logp
        order = np.argsort(-totals.ravel(), kind="stable")
        slots = width - len(finished)
        V = logp.shape[1]
        new_live, rows, toks = [], [], []
        for flat_idx in order[:slots]:
            i, tok = divmod(int(flat_idx), V)
            tokens, lps, _ = live[i]
            hyp = (tokens + (tok,), lps + (float(logp[i, tok]),), float(totals[i, tok]))
            if tok == eos or t == max_len - 1:
                out = DecodeOutput(hyp[0], tok == eos, hyp[1])
                finished.append((hyp[2] / len(hyp[0]), out))
            else:
                new_live.append(hyp)
                rows.append(i)
                toks.append(tok)
        if not new_live:
            break
        live = new_live
        h = h_all[rows]
        prev = np.array(toks)
    best = max(range(len(finished)), key=lambda k: (finished[k][0], -k))
    return finished[best][1]


@dataclass(frozen=True)
class Decoder:
    """A decoding algorithm F(theta, X) applied to a whole batch.

    ``max_len=None`` uses the training-time cap ``ceil(1.3 * longest target)``.
    For ancestral decoding, example ``i`` draws from substream
    ``noise_key + (i,)`` so every candidate parameter vector sees the same
    noise.
    """

    kind: str = "greedy"
    max_len: int | None = None
    width: int = 5
    noise_key: tuple[int, ...] = (0,)

    def __post_init__(self):
        if self.kind not in ("greedy", "ancestral", "beam"):
            raise ValueError(f"unknown decoder {self.kind!r}")

    def with_noise(self, *key: int) -> "Decoder":
        return Decoder(self.kind, self.max_len, self.width, tuple(key))

    def cap(self, batch: Sequence[Example]) -> int:
        return train_max_len(batch) if self.max_len is None else self.max_len

    def __call__(self, params: ModelParams, batch: Sequence[Example]) -> list[DecodeOutput]:
        Xs = [e.X for e in batch]
        cap = self.cap(batch)
        if self.kind == "greedy":
            return decode_greedy_batch(params, Xs, cap)
        if self.kind == "ancestral":
            noises = [NoiseStream(self.noise_key + (i,)) for i in range(len(Xs))]
            return decode_ancestral_batch(params, Xs, noises, cap)
        return [decode_beam(params, X, self.width, cap) for X in Xs]
