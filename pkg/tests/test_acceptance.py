"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line (see ``conftest.criterion``); the
lines are repeated in the terminal summary.
"""

import json
import time
from pathlib import Path

import pytest

from mgslab.harness import verify
from mgslab.harness.data import gen_task, write_task
from mgslab.harness.driver import run_eval, run_training

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"


def _checks(checks, names=None):
    picked = [c for c in checks if names is None or c.name in names]
    return all(c.passed for c in picked), "; ".join(c.line() for c in picked)


def test_criterion_1_gradient_correctness(criterion):
    t = time.perf_counter()
    ok, detail = _checks(verify.suite_grad(0, instances=100))
    took = time.perf_counter() - t
    assert criterion(1, "gradient vs finite differences", ok and took < 60, f"{detail}; {took:.0f}s (< 60s)")


def test_criterion_2_pg_unbiased(criterion):
    t = time.perf_counter()
    checks = verify.suite_pg(0, instances=5, samples=100_000)
    took = time.perf_counter() - t
    ok, detail = _checks(checks, {"pg.monte_carlo_cosine", "pg.monte_carlo_per_coordinate", "pg.constant_cost_zero"})
    assert criterion(2, "PG estimator unbiasedness", ok and took < 300, f"{detail}; {took:.0f}s (< 300s)")


def test_criterion_3_mrt_identity(criterion):
    t = time.perf_counter()
    ok, detail = _checks(verify.suite_mrt(0, instances=50))
    took = time.perf_counter() - t
    assert criterion(3, "MRT gradient identity", ok and took < 120, f"{detail}; {took:.0f}s (< 120s)")


def test_criterion_4_snis_consistency(criterion):
    t = time.perf_counter()
    checks = verify.suite_snis(0, seeds=20)
    took = time.perf_counter() - t
    ok, detail = _checks(checks, {"snis.K1e4_vs_quadrature", "snis.median_error_decreasing"})
    assert criterion(4, "SNIS consistency", ok and took < 300, f"{detail}; {took:.0f}s (< 300s)")


def test_criterion_5_weight_algebra(criterion):
    t = time.perf_counter()
    ok, detail = _checks(verify.weight_algebra(0, sets=1000))
    took = time.perf_counter() - t
    assert criterion(5, "weight algebra", ok and took < 60, f"{detail}; {took:.0f}s (< 60s)")


def test_criterion_9_determinism(criterion, tmp_path, capsys):
    from mgslab.harness.cli import main

    data = tmp_path / "data"
    assert main(["gen-data", "--task", "trap", "--train", "200", "--valid", "20", "--test", "20", "--seed", "3", "--out", str(data)]) == 0
    cfg = tmp_path / "run.txt"
    cfg.write_text(
        f"data_dir = {data}\nemb_dim = 8\nhidden_dim = 8\nbatch_size = 8\nmax_steps = 10\neval_interval = 5\n"
        "eval_max_len = 20\nalgorithm = mgs\nK = 3\nnoise = 0.1\nmix_rate = 0.5\n"
    )
    same = {}
    for i in (0, 1):
        assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / f"r{i}")]) == 0
    same["train metrics"] = (tmp_path / "r0" / "metrics.jsonl").read_bytes() == (tmp_path / "r1" / "metrics.jsonl").read_bytes()
    capsys.readouterr()
    outs = {}
    for name, argv in {
        "eval greedy": ["eval", "--ckpt", str(tmp_path / "r0" / "best.ckpt"), "--data", str(data / "test.tsv"), "--max-len", "20"],
        "eval ancestral": ["eval", "--ckpt", str(tmp_path / "r0" / "best.ckpt"), "--data", str(data / "test.tsv"), "--decoder", "ancestral", "--seed", "2"],
        "verify": ["verify", "--suite", "mrt"],
    }.items():
        runs = []
        for _ in (0, 1):
            main(argv)
            runs.append(capsys.readouterr().out)
        outs[name] = runs[0]
        same[name] = runs[0] == runs[1] and runs[0] != ""
    ok = all(same.values())
    assert criterion(9, "determinism", ok, ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in same.items()))


SEEDS = range(5)


def _valid_at(run_dir, step):
    for line in (Path(run_dir) / "metrics.jsonl").read_text().splitlines():
        rec = json.loads(line)
        if rec["split"] == "valid" and rec["step"] == step:
            return rec
    raise KeyError(step)


def _best(run_dir):
    summary = json.loads((Path(run_dir) / "summary.json").read_text())
    return _valid_at(run_dir, summary["best_step"])


def _train_tail_cost(run_dir, frac=0.2):
    recs = [json.loads(line) for line in (Path(run_dir) / "metrics.jsonl").read_text().splitlines()]
    recs = [r for r in recs if r["split"] == "train" and r["task_loss"] is not None]
    last = recs[-1]["step"]
    tail = [r["task_loss"] for r in recs if r["step"] > last * (1 - frac)]
    return sum(tail) / len(tail)


@pytest.fixture(scope="module")
def trap_mle(tmp_path_factory):
    """Trap data plus one early-stopped MLE model per seed; returns (root, seconds)."""
    root = tmp_path_factory.mktemp("trap")
    t = time.perf_counter()
    write_task(gen_task("trap", (20000, 200, 200), 1), root / "data")
    for s in SEEDS:
        run_training(str(CONFIGS / "trap_mle.txt"), s, root / f"mle{s}", overrides={"data_dir": str(root / "data")})
    return root, time.perf_counter() - t


def _trap_mgs(root, seed, out, **extra):
    ov = {"data_dir": str(root / "data"), "init_ckpt": str(root / f"mle{seed}" / "best.ckpt")}
    ov.update(extra)
    return run_training(str(CONFIGS / "trap_mgs_lm.txt"), seed, root / out, overrides=ov)


def test_criterion_6_failure_mode_reproduction(criterion, trap_mle):
    root, took = trap_mle
    t = time.perf_counter()
    rows, passed = [], 0
    for s in SEEDS:
        a = _best(root / f"mle{s}")
        b = _best(_trap_mgs(root, s, f"mgs{s}"))
        ok = (
            a["nonterm_rate"] >= 0.2
            and a["repetition_rate"] >= 0.3
            and b["nonterm_rate"] <= 0.5 * a["nonterm_rate"]
            and b["repetition_rate"] <= 0.5 * a["repetition_rate"]
            and b["perplexity"] < 1.15 * a["perplexity"]
        )
        passed += ok
        rows.append(
            f"seed {s} {'ok' if ok else 'no'}: nonterm {a['nonterm_rate']:.2f}->{b['nonterm_rate']:.2f} "
            f"rep {a['repetition_rate']:.2f}->{b['repetition_rate']:.2f} ppl x{b['perplexity'] / a['perplexity']:.3f}"
        )
    took += time.perf_counter() - t
    ok = passed >= 4 and took < 1800
    assert criterion(6, "failure-mode reproduction", ok, f"{passed}/5 seeds; " + "; ".join(rows) + f"; {took:.0f}s (< 1800s)")


def test_criterion_7_proposal_ablation(criterion, trap_mle):
    root, took = trap_mle
    t = time.perf_counter()
    rows, passed = [], 0
    for s in SEEDS:
        cost = {
            ab: _train_tail_cost(_trap_mgs(root, s, f"abl_{ab}{s}", proposal_ablation=ab, eval_interval="300"))
            for ab in ("mgs", "zero_only", "mle_only")
        }
        ok = cost["mgs"] <= min(cost["zero_only"], cost["mle_only"])
        passed += ok
        rows.append(f"seed {s} {'ok' if ok else 'no'}: " + " ".join(f"{k} {v:.2f}" for k, v in cost.items()))
    took += time.perf_counter() - t
    ok = passed >= 4 and took < 2700
    assert criterion(7, "proposal ablation", ok, f"{passed}/5 seeds; " + "; ".join(rows) + f"; {took:.0f}s (< 2700s)")


def test_criterion_8_toy_mt_improvement(criterion, tmp_path):
    t = time.perf_counter()
    data = tmp_path / "data"
    write_task(gen_task("toy_mt", (10000, 200, 200), 0), data)
    test_file = data / "test.tsv"
    rows, passed = [], 0
    for s in SEEDS:
        mle = run_training(str(CONFIGS / "toy_mt_mle.txt"), s, tmp_path / f"mle{s}", overrides={"data_dir": str(data)})
        mgs = run_training(
            str(CONFIGS / "toy_mt_mgs_sbleu.txt"),
            s,
            tmp_path / f"mgs{s}",
            overrides={"data_dir": str(data), "init_ckpt": str(mle / "best.ckpt")},
        )
        a = 1 - run_eval(mle / "best.ckpt", test_file, max_len=30, loss="sbleu").task_loss
        b = 1 - run_eval(mgs / "best.ckpt", test_file, max_len=30, loss="sbleu").task_loss
        passed += b > a
        rows.append(f"seed {s} {'ok' if b > a else 'no'}: bleu {a:.4f}->{b:.4f}")
    took = time.perf_counter() - t
    ok = passed >= 4 and took < 1800
    assert criterion(8, "toy_mt improvement", ok, f"{passed}/5 seeds; " + "; ".join(rows) + f"; {took:.0f}s (< 1800s)")
