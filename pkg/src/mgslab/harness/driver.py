"""Training and evaluation driver: batching, evaluation, early stopping, persistence.

A run directory holds::

    config.txt      resolved configuration
    metrics.jsonl   one MetricsRecord per line (train steps and evaluations)
    best.ckpt       parameters with the best validation selection metric
    last.ckpt       parameters at the latest evaluation
    state.npz       trainer state (step, baseline, optimiser moments, patience)
    summary.json    best step and metric once training ends
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..decoding import Decoder, NoiseStream, decode_ancestral_batch
from ..losses import TaskLoss, repetition, strip_eos
from ..model import (
    Example,
    ModelConfig,
    ModelParams,
    Vocabulary,
    eos_index,
    init_params,
    load_checkpoint,
    save_checkpoint,
    sequence_log_probs,
)
from ..trainers import TrainerState, mixed_step
from .config import RunConfig, dump_config, load_config, with_overrides
from .data import load_split, read_examples

log = logging.getLogger(__name__)

_EVAL_NOISE = 7


class VocabularyMismatchError(ValueError):
    pass


@dataclass
class MetricsRecord:
    step: int
    split: str
    task_loss: float | None
    perplexity: float | None
    nonterm_rate: float | None
    repetition_rate: float | None
    avg_len: float | None
    diagnostics: dict | None = None

    def to_json(self) -> str:
        return json.dumps(_finite(asdict(self)))


def _finite(obj):
    # JSON has no NaN/inf; write null instead
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    return obj


def make_loss(kind: str, scorer: ModelParams | None = None) -> TaskLoss:
    return TaskLoss(kind, scorer if kind == "lm" else None)


def evaluate(
    params: ModelParams,
    examples: Sequence[Example],
    decoder: Decoder,
    loss: TaskLoss,
    step: int = 0,
    split: str = "valid",
    batch_size: int = 64,
) -> MetricsRecord:
    """Decode every example and aggregate the evaluation metrics."""
    if not examples:
        raise ValueError("nothing to evaluate")
    eos = eos_index(params.config)
    losses, nts, reps, lens, nlls = [], [], [], [], []
    for start in range(0, len(examples), batch_size):
        chunk = list(examples[start : start + batch_size])
        if decoder.kind == "ancestral":
            # noise keyed by global example index: results do not depend on batch_size
            noises = [NoiseStream(decoder.noise_key + (start + i,)) for i in range(len(chunk))]
            outs = decode_ancestral_batch(params, [e.X for e in chunk], noises, decoder.cap(chunk))
        else:
            outs = decoder(params, chunk)
        losses.extend(loss.batch(outs, chunk, eos).tolist())
        for o in outs:
            content = strip_eos(o.tokens, eos)
            nts.append(0 if o.terminated else 1)
            reps.append(repetition(content))
            lens.append(len(content))
        nlls.extend((-sequence_log_probs(params, [e.X for e in chunk], [e.Y for e in chunk])).tolist())
    n = len(examples)
    tokens = sum(len(e.Y) for e in examples)
    return MetricsRecord(
        step=step,
        split=split,
        task_loss=math.fsum(losses) / n,
        perplexity=math.exp(math.fsum(nlls) / tokens),
        nonterm_rate=sum(nts) / n,
        repetition_rate=math.fsum(reps) / n,
        avg_len=sum(lens) / n,
    )


def batch_for(train: Sequence[Example], step: int, batch_size: int, seed: int) -> list[Example]:
    """Batch ``step``: slice of a per-epoch permutation; partial tails are dropped."""
    per_epoch = max(len(train) // batch_size, 1)
    epoch, pos = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch, 1]).permutation(len(train))
    idx = order[pos * batch_size : (pos + 1) * batch_size]
    return [train[i] for i in idx]


def _load_params(path: str, vocab: Vocabulary) -> ModelParams:
    params, ck_vocab, _ = load_checkpoint(path)
    if ck_vocab != vocab:
        raise VocabularyMismatchError(f"{path}: checkpoint vocabulary differs from the data's")
    return params


def _save_state(path: Path, state: TrainerState, best: float, best_step: int, bad: int) -> None:
    arrays = {}
    if state.adam_m is not None:
        arrays = {"adam_m": state.adam_m, "adam_v": state.adam_v}
    meta = json.dumps(
        {"step": state.step, "baseline": state.baseline, "adam_t": state.adam_t, "best": best, "best_step": best_step, "bad": bad}
    )
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(meta), **arrays)


def _load_state(path: Path):
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        m = z["adam_m"].copy() if "adam_m" in z.files else None
        v = z["adam_v"].copy() if "adam_v" in z.files else None
    state = TrainerState(meta["step"], meta["baseline"], m, v, meta["adam_t"])
    return state, meta["best"], meta["best_step"], meta["bad"]


def run_training(cfg: RunConfig | str, seed: int, out_dir, resume: bool = False, overrides: dict | None = None) -> Path:
    """Train per ``cfg``; returns the run directory."""
    if not isinstance(cfg, RunConfig):
        cfg = load_config(cfg)
    if overrides:
        cfg = with_overrides(cfg, overrides)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.trainer
    train, vocab = load_split(cfg.data_dir, "train")
    valid, _ = load_split(cfg.data_dir, "valid")
    if cfg.eval_examples:
        valid = valid[: cfg.eval_examples]

    if cfg.init_ckpt:
        params = _load_params(cfg.init_ckpt, vocab)
    else:
        params = init_params(ModelConfig(vocab.size, cfg.emb_dim, cfg.hidden_dim), seed)
    scorer = None
    if cfg.task_loss == "lm":
        scorer = _load_params(cfg.scorer_ckpt or cfg.init_ckpt, vocab)
    loss = make_loss(cfg.task_loss, scorer)
    train_decoder = Decoder(cfg.train_decoder, None, cfg.beam_width)
    eval_decoder = Decoder(cfg.eval_decoder, cfg.eval_max_len, cfg.beam_width, (seed, _EVAL_NOISE))
    selection = cfg.selection
    if selection == "auto":
        selection = "perplexity" if tcfg.algorithm == "mle" else "task_loss"

    metrics_path = out / "metrics.jsonl"
    state_path = out / "state.npz"
    if resume and state_path.exists():
        params = _load_params(str(out / "last.ckpt"), vocab)
        state, best, best_step, bad = _load_state(state_path)
        kept = [
            line
            for line in metrics_path.read_text(encoding="utf-8").splitlines()
            if json.loads(line)["step"] <= state.step
        ]
        metrics_path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
    else:
        state, bad, best_step = TrainerState(), 0, 0
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        rec = evaluate(params, valid, eval_decoder, loss, 0, "valid")
        metrics_path.write_text(rec.to_json() + "\n", encoding="utf-8")
        best = getattr(rec, selection)
        save_checkpoint(out / "best.ckpt", params, vocab, seed, {"step": 0})
        save_checkpoint(out / "last.ckpt", params, vocab, seed, {"step": 0})
        _save_state(state_path, state, best, best_step, bad)

    with open(metrics_path, "a", encoding="utf-8") as mf:
        while state.step < cfg.max_steps and bad < cfg.patience:
            batch = batch_for(train, state.step, cfg.batch_size, seed)
            params, diag, state = mixed_step(params, batch, tcfg, seed, state, loss, train_decoder)
            tokens = sum(len(e.Y) for e in batch)
            rec = MetricsRecord(
                state.step,
                "train",
                diag.pooled_cost_before,
                None if diag.nll is None else math.exp(diag.nll / tokens),
                None,
                None,
                None,
                diag.to_dict(),
            )
            mf.write(rec.to_json() + "\n")
            if state.step % cfg.eval_interval == 0:
                rec = evaluate(params, valid, eval_decoder, loss, state.step, "valid")
                mf.write(rec.to_json() + "\n")
                mf.flush()
                value = getattr(rec, selection)
                if value < best:
                    best, best_step, bad = value, state.step, 0
                    save_checkpoint(out / "best.ckpt", params, vocab, seed, {"step": state.step})
                else:
                    bad += 1
                log.info("step %d valid %s=%.4f (best %.4f @ %d)", state.step, selection, value, best, best_step)
                save_checkpoint(out / "last.ckpt", params, vocab, seed, {"step": state.step})
                _save_state(state_path, state, best, best_step, bad)

    save_checkpoint(out / "last.ckpt", params, vocab, seed, {"step": state.step})
    _save_state(state_path, state, best, best_step, bad)
    summary = {"best_step": best_step, "best": best, "selection": selection, "steps": state.step, "early_stopped": bad >= cfg.patience}
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n", encoding="utf-8")
    return out


def run_eval(
    ckpt,
    data_file,
    decoder: str = "greedy",
    width: int = 5,
    max_len: int = 100,
    seed: int = 0,
    loss: str = "edit",
    scorer_ckpt=None,
) -> MetricsRecord:
    params, vocab, header = load_checkpoint(ckpt)
    try:
        examples = read_examples(data_file, vocab)
    except ValueError as e:
        raise VocabularyMismatchError(f"data does not match the checkpoint vocabulary: {e}") from None
    scorer = None
    if loss == "lm":
        scorer = load_checkpoint(scorer_ckpt)[0] if scorer_ckpt else params
    dec = Decoder(decoder, max_len, width, (seed, _EVAL_NOISE))
    step = int(header.get("extra", {}).get("step", 0))
    return evaluate(params, examples, dec, make_loss(loss, scorer), step, Path(data_file).stem)


def parse_grid(text: str) -> dict[str, list[str]]:
    grid = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, values = (s.strip() for s in line.split("=", 1))
        grid[key] = [v.strip() for v in values.split(",") if v.strip()]
    return grid


def _sweep_run(args) -> Path:
    cfg, seed, run_dir = args
    return run_training(cfg, seed, run_dir)


def sweep(config_path, grid_path, out_dir, seed: int = 0, jobs: int = 1) -> list[dict]:
    """Train one run per point of the Cartesian grid; results in ``sweep.jsonl``.

    Runs are independent, so ``jobs > 1`` trains them in worker processes.
    """
    base = load_config(config_path)
    grid = parse_grid(Path(grid_path).read_text(encoding="utf-8"))
    keys = sorted(grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]
    tasks = [(with_overrides(base, ov), seed, out / f"run_{i:03d}") for i, ov in enumerate(points)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            run_dirs = list(pool.map(_sweep_run, tasks))
    else:
        run_dirs = [_sweep_run(t) for t in tasks]
    rows = []
    for overrides, run_dir in zip(points, run_dirs):
        summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
        rows.append({"run": run_dir.name, "overrides": overrides, **summary})
    (out / "sweep.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows), encoding="utf-8")
    return rows
