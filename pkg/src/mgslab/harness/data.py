"""Synthetic tasks and the tab-separated data format.

Data files hold one example per line: space-joined X tokens, a tab, and
space-joined Y tokens without the trailing eos (appended on load).  A
``vocab.txt`` next to the splits lists the vocabulary, one token per line.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..model import Example, Vocabulary, check_example

TASKS = ("copy", "reverse", "trap", "toy_mt")
SPLITS = ("train", "valid", "test")


@dataclass
class Dataset:
    examples: list[Example]
    split: str
    task: str
    vocab: Vocabulary


def task_vocabulary(task: str) -> Vocabulary:
    if task in ("copy", "reverse"):
        return Vocabulary.build([chr(ord("a") + i) for i in range(10)])
    if task == "trap":
        return Vocabulary.build([f"t{i}" for i in range(8)])
    if task == "toy_mt":
        return Vocabulary.build([f"s{i}" for i in range(12)] + [f"T{i}" for i in range(12)])
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


# trap grammar ---------------------------------------------------------------
#
# A first-order chain over t0..t7.  t0 -> t1 -> t2 -> t0 is the dominant
# cycle and t3..t7 feed into it.  eos is never the most likely successor, so
# a greedy decoder that has learned the chain loops forever.  After t2 eos
# is the runner-up (.30 vs .50): terminating costs little likelihood.
# Targets are capped at 50 tokens; the cap almost never binds, so the data
# carries no length cue a model could use to end a loop.

TRAP_CYCLE_P = 0.45
TRAP_EOS_P = 0.15
TRAP_CLOSE = {2: (0.50, 0.30)}  # token: (successor prob, eos prob)


def trap_transitions() -> np.ndarray:
    """Row i: next-token distribution after t_i over (t0..t7, eos)."""
    n = 8
    P = np.zeros((n, n + 1))
    for i in range(n):
        succ = (i + 1) % 3 if i < 3 else i % 3
        p_succ, p_eos = TRAP_CLOSE.get(i, (TRAP_CYCLE_P, TRAP_EOS_P))
        others = [j for j in range(n) if j != succ]
        P[i, others] = (1.0 - p_succ - p_eos) / len(others)
        P[i, succ] = p_succ
        P[i, n] = p_eos
    return P


def _trap_example(rng, max_target=50):
    P = trap_transitions()
    content = P[:, :8] / P[:, :8].sum(axis=1, keepdims=True)
    while True:
        x = [int(rng.integers(8))]
        for _ in range(int(rng.integers(3, 7)) - 1):
            x.append(int(rng.choice(8, p=content[x[-1]])))
        y, last = [], x[-1]
        while len(y) <= max_target:
            nxt = int(rng.choice(9, p=P[last]))
            if nxt == 8:
                break
            y.append(nxt)
            last = nxt
        if 1 <= len(y) <= max_target:
            return x, y


MT_PERM = (7, 2, 10, 4, 0, 11, 5, 9, 1, 3, 8, 6)


def _mt_target(x: Sequence[int]) -> list[int]:
    words = [12 + MT_PERM[t] for t in x]
    for i in range(0, len(words) - 1, 2):
        words[i], words[i + 1] = words[i + 1], words[i]
    return words


def _raw_example(task: str, rng) -> tuple[list[int], list[int]]:
    if task in ("copy", "reverse"):
        x = [int(t) for t in rng.integers(0, 10, size=int(rng.integers(3, 9)))]
        return x, (list(x) if task == "copy" else x[::-1])
    if task == "trap":
        return _trap_example(rng)
    if task == "toy_mt":
        x = [int(t) for t in rng.integers(0, 12, size=int(rng.integers(3, 9)))]
        return x, _mt_target(x)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def gen_task(task: str, sizes: dict[str, int] | Sequence[int], seed: int) -> dict[str, Dataset]:
    """Generate train/valid/test splits, disjoint by example content."""
    vocab = task_vocabulary(task)
    if not isinstance(sizes, dict):
        sizes = dict(zip(SPLITS, sizes))
    if any(sizes.get(s, 0) <= 0 for s in SPLITS):
        raise ValueError("split sizes must be positive")
    rng = np.random.default_rng(seed)
    seen: set = set()
    out = {}
    for split in SPLITS:
        examples, tries = [], 0
        while len(examples) < sizes[split]:
            tries += 1
            if tries > 200 * sizes[split] + 10_000:
                raise RuntimeError(f"could not draw {sizes[split]} distinct {task} examples")
            x, y = _raw_example(task, rng)
            key = (tuple(x), tuple(y))
            # training data may repeat (it is a sample); held-out data is unseen
            if split != "train" and key in seen:
                continue
            seen.add(key)
            examples.append(Example(x, y + [vocab.eos_index]))
        out[split] = Dataset(examples, split, task, vocab)
    return out


def write_dataset(ds: Dataset, path) -> None:
    v = ds.vocab
    lines = [" ".join(v.decode(e.X)) + "\t" + " ".join(v.decode(e.Y[:-1])) for e in ds.examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_vocab(vocab: Vocabulary, path) -> None:
    Path(path).write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")


def read_vocab(path) -> Vocabulary:
    tokens = [t for t in Path(path).read_text(encoding="utf-8").split("\n") if t]
    return Vocabulary(tuple(tokens), len(tokens) - 2, len(tokens) - 1)


def read_examples(path, vocab: Vocabulary) -> list[Example]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ValueError(f"{path}:{n}: expected two tab-separated fields")
        xs, ys = line.split("\t", 1)
        try:
            ex = Example(vocab.encode(xs.split()), vocab.encode(ys.split()) + [vocab.eos_index])
        except KeyError as e:
            raise ValueError(f"{path}:{n}: {e.args[0]}") from None
        check_example(ex, vocab)
        out.append(ex)
    return out


def write_task(splits: dict[str, Dataset], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, ds in splits.items():
        write_dataset(ds, out / f"{split}.tsv")
    write_vocab(next(iter(splits.values())).vocab, out / "vocab.txt")


def load_split(data_dir, split: str) -> tuple[list[Example], Vocabulary]:
    d = Path(data_dir)
    vocab = read_vocab(d / "vocab.txt")
    return read_examples(d / f"{split}.tsv", vocab), vocab
