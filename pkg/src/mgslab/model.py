"""GRU encoder-decoder p(Y|X) with a flat parameter view.

One GRU cell is shared by the encoder and the decoder.  The encoder's final
hidden state initialises the decoder, whose first input is the eos token
(eos doubles as begin-of-sequence).  The output softmax ranges over every
vocabulary entry except padding, which is always the last index.

All math exists in two forms that share the cell code below: a plain numpy
path used for decoding and scoring, and a :mod:`mgslab.autodiff` path used
whenever a gradient is needed.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor

EOS = "<eos>"
PAD = "<pad>"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    eos_index: int
    pad_index: int

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        if self.eos_index == self.pad_index:
            raise ValueError("eos and pad must differ")
        if self.pad_index != len(self.tokens) - 1 or self.eos_index != len(self.tokens) - 2:
            raise ValueError("eos and pad must be the last two vocabulary entries")

    @classmethod
    def build(cls, content: Sequence[str]) -> "Vocabulary":
        tokens = tuple(content) + (EOS, PAD)
        return cls(tokens, len(content), len(content) + 1)

    @property
    def size(self) -> int:
        """Number of tokens the model can emit (everything but padding)."""
        return len(self.tokens) - 1

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index(w) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Example:
    X: tuple[int, ...]
    Y: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "X", tuple(int(t) for t in self.X))
        object.__setattr__(self, "Y", tuple(int(t) for t in self.Y))


def check_example(ex: Example, vocab: Vocabulary) -> None:
    if not ex.Y:
        raise ValueError("target sequence is empty")
    if ex.Y[-1] != vocab.eos_index:
        raise ValueError("target must end in eos")
    if vocab.eos_index in ex.Y[:-1]:
        raise ValueError("eos may only appear last in a target")
    if vocab.pad_index in ex.X or vocab.pad_index in ex.Y:
        raise ValueError("pad token inside an example")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    emb_dim: int = 32
    hidden_dim: int = 64

    def shapes(self) -> dict[str, tuple[int, ...]]:
        V, E, H = self.vocab_size, self.emb_dim, self.hidden_dim
        shapes = {
            "b_gates": (3 * H,),
            "b_out": (V,),
            "emb": (V, E),
            "w_hidden": (H, 3 * H),
            "w_input": (E, 3 * H),
            "w_out": (H, V),
        }
        return dict(sorted(shapes.items()))

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes().values())


class ModelParams:
    """Immutable named parameter tensors backed by one flat float64 vector.

    Canonical flat order: tensors sorted by name, each in row-major order.
    """

    def __init__(self, config: ModelConfig, flat: np.ndarray):
        flat = np.array(flat, dtype=np.float64)
        if flat.shape != (config.num_params,):
            raise ValueError(f"expected {config.num_params} parameters, got shape {flat.shape}")
        flat.setflags(write=False)
        self.config = config
        self._flat = flat
        self.tensors: dict[str, np.ndarray] = {}
        self.slices: dict[str, slice] = {}
        start = 0
        for name, shape in config.shapes().items():
            n = int(np.prod(shape))
            self.slices[name] = slice(start, start + n)
            self.tensors[name] = flat[start : start + n].reshape(shape)
            start += n

    @property
    def flat(self) -> np.ndarray:
        return self._flat

    def __len__(self) -> int:
        return self._flat.size

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        """Split a flat vector (e.g. a gradient) into named arrays."""
        return {name: vec[s].reshape(self.tensors[name].shape) for name, s in self.slices.items()}

    def flatten(self, named: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(named[name], dtype=np.float64).ravel() for name in self.slices])

    def digest(self) -> str:
        return hashlib.sha256(self._flat.tobytes()).hexdigest()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ModelParams)
            and self.config == other.config
            and np.array_equal(self._flat, other._flat)
        )

    def __hash__(self):
        return hash(self.digest())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    rng = np.random.default_rng(seed)
    return ModelParams(config, rng.uniform(-0.1, 0.1, size=config.num_params))


def apply_perturbation(params: ModelParams, delta: np.ndarray) -> ModelParams:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != params.flat.shape:
        raise ValueError(f"perturbation has shape {delta.shape}, parameters {params.flat.shape}")
    return ModelParams(params.config, params.flat + delta)


def clip_gradient(g: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= max_norm:
        return g
    return g * (max_norm / norm)


# cell math shared by numpy and autodiff paths ---------------------------


def _np_sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _np_log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class _NumpyOps:
    sigmoid = staticmethod(_np_sigmoid)
    tanh = staticmethod(np.tanh)
    log_softmax = staticmethod(_np_log_softmax)

    @staticmethod
    def embed(table, idx):
        return table[idx]


class _GraphOps:
    sigmoid = staticmethod(ad.sigmoid)
    tanh = staticmethod(ad.tanh)
    log_softmax = staticmethod(ad.log_softmax)
    embed = staticmethod(ad.embedding)


def _gru(p, x, h, ops):
    H = h.shape[-1]
    gx = x @ p["w_input"] + p["b_gates"]
    gh = h @ p["w_hidden"]
    z = ops.sigmoid(gx[:, :H] + gh[:, :H])
    r = ops.sigmoid(gx[:, H : 2 * H] + gh[:, H : 2 * H])
    n = ops.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
    return (1.0 - z) * n + z * h


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    T = max((len(s) for s in seqs), default=0)
    idx = np.zeros((len(seqs), T), dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.float64)
    for i, s in enumerate(seqs):
        idx[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return idx, mask


def _check_tokens(seqs: Sequence[Sequence[int]], V: int) -> None:
    for s in seqs:
        for t in s:
            if not 0 <= t < V:
                raise ValueError(f"invalid token index {t} for vocabulary of {V} emittable tokens")


def _encode(p, Xs, H, ops):
    idx, mask = _pad(Xs)
    h = np.zeros((len(Xs), H))
    if ops is _GraphOps:
        h = Tensor(h)
    for t in range(idx.shape[1]):
        m = mask[:, t : t + 1]
        h_new = _gru(p, ops.embed(p["emb"], idx[:, t]), h, ops)
        h = h_new * m + h * (1.0 - m)
    return h


def _step(p, tokens, h, ops):
    h = _gru(p, ops.embed(p["emb"], tokens), h, ops)
    logits = h @ p["w_out"] + p["b_out"]
    return ops.log_softmax(logits), h


# numpy path --------------------------------------------------------------


class DecoderState:
    """Batched decoder state for incremental generation."""

    def __init__(self, params: ModelParams, Xs: Sequence[Sequence[int]]):
        _check_tokens(Xs, params.config.vocab_size)
        self.params = params
        self.h = _encode(params.tensors, Xs, params.config.hidden_dim, _NumpyOps)

    def step(self, tokens: np.ndarray, rows: np.ndarray | None = None) -> np.ndarray:
        """Feed ``tokens`` and return next-token log-probs; updates state.

        ``rows`` restricts the update to a subset of the batch.
        """
        h = self.h if rows is None else self.h[rows]
        logp, h_new = _step(self.params.tensors, np.asarray(tokens), h, _NumpyOps)
        if not np.all(np.isfinite(logp)) or not np.all(np.isfinite(h_new)):
            raise NonFiniteError("non-finite model output")
        if rows is None:
            self.h = h_new
        else:
            self.h[rows] = h_new
        return logp


def eos_index(config: ModelConfig) -> int:
    """eos is always the last emittable token (see :class:`Vocabulary`)."""
    return config.vocab_size - 1


def next_token_log_probs(params: ModelParams, X: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    _check_tokens([X, prefix], params.config.vocab_size)
    state = DecoderState(params, [X])
    tok = np.array([eos_index(params.config)])
    logp = state.step(tok)
    for t in prefix:
        logp = state.step(np.array([t]))
    return logp[0]


def sequence_log_probs(params: ModelParams, Xs: Sequence[Sequence[int]], Ys: Sequence[Sequence[int]]) -> np.ndarray:
    """log p(Y|X) for each pair; Y may or may not end in eos."""
    V = params.config.vocab_size
    _check_tokens(Ys, V)
    state = DecoderState(params, Xs)
    yidx, ymask = _pad(Ys)
    B, T = yidx.shape
    total = np.zeros(B)
    prev = np.full(B, eos_index(params.config))
    rows = np.arange(B)
    for t in range(T):
        logp = state.step(prev)
        total += logp[rows, yidx[:, t]] * ymask[:, t]
        prev = yidx[:, t]
    return total


def sequence_log_prob(params: ModelParams, X: Sequence[int], Y: Sequence[int]) -> float:
    return float(sequence_log_probs(params, [X], [Y])[0])


def nll(params: ModelParams, batch: Sequence[Example]) -> float:
    """Total negative log-likelihood (numpy path, no graph)."""
    if not batch:
        raise ValueError("empty batch")
    return float(-sequence_log_probs(params, [e.X for e in batch], [e.Y for e in batch]).sum())


def perplexity(params: ModelParams, data: Sequence[Example]) -> float:
    if not data:
        raise ValueError("empty data")
    tokens = sum(len(e.Y) for e in data)
    return float(np.exp(nll(params, data) / tokens))


# autodiff path -------------------------------------------------------------


def sequence_log_probs_graph(p: dict[str, Tensor], config: ModelConfig, Xs, Ys) -> Tensor:
    """Differentiable log p(Y|X) for each pair, shape (B,)."""
    _check_tokens(Xs, config.vocab_size)
    _check_tokens(Ys, config.vocab_size)
    h = _encode(p, Xs, config.hidden_dim, _GraphOps)
    yidx, ymask = _pad(Ys)
    B, T = yidx.shape
    prev = np.full(B, eos_index(config))
    terms = []
    for t in range(T):
        # state past a sequence's end only feeds masked-out terms
        logp, h = _step(p, prev, h, _GraphOps)
        terms.append(ad.gather(logp, yidx[:, t]) * ymask[:, t])
        prev = yidx[:, t]
    if not terms:
        return Tensor(np.zeros(B))
    return ad.stack(terms, axis=1).sum(axis=1)


def nll_batch(p: dict[str, Tensor], config: ModelConfig, batch: Sequence[Example]) -> Tensor:
    """Graph root: summed negative log-likelihood over the batch."""
    if not batch:
        raise ValueError("empty batch")
    return -sequence_log_probs_graph(p, config, [e.X for e in batch], [e.Y for e in batch]).sum()


def nll_and_grad(params: ModelParams, batch: Sequence[Example]) -> tuple[float, np.ndarray]:
    """Summed NLL and its flat gradient."""
    value, grads = ad.value_and_grad(lambda **p: nll_batch(p, params.config, batch), params.tensors)
    return value, params.flatten(grads)


def graph_value_and_grad(params: ModelParams, fn) -> tuple[float, np.ndarray]:
    """Evaluate ``fn(tensor_dict) -> scalar Tensor`` and its flat gradient."""
    value, grads = ad.value_and_grad(lambda **p: fn(p), params.tensors)
    return value, params.flatten(grads)


# checkpoints ---------------------------------------------------------------

MAGIC = b"MGSLAB01"


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary, seed: int, extra: dict | None = None) -> None:
    """Write params with a JSON header; layout described in docs/checkpoint_format.md."""
    cfg = params.config
    header = {
        "format": 1,
        "vocab_size": cfg.vocab_size,
        "emb_dim": cfg.emb_dim,
        "hidden_dim": cfg.hidden_dim,
        "num_params": cfg.num_params,
        "layout": [[name, list(shape)] for name, shape in cfg.shapes().items()],
        "tokens": list(vocab.tokens),
        "eos_index": vocab.eos_index,
        "pad_index": vocab.pad_index,
        "seed": seed,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = params.flat.astype("<f8").tobytes()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(blob)) + blob + payload)


def load_checkpoint(path) -> tuple[ModelParams, Vocabulary, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    flat = np.frombuffer(raw[16 + n :], dtype="<f8").astype(np.float64)
    cfg = ModelConfig(header["vocab_size"], header["emb_dim"], header["hidden_dim"])
    vocab = Vocabulary(tuple(header["tokens"]), header["eos_index"], header["pad_index"])
    return ModelParams(cfg, flat), vocab, header
