"""Oracle verification suites behind ``mgslab verify``.

Each suite returns a list of :class:`Check` results carrying the measured
error next to its bound.  Output never includes timings, so repeated runs
with the same seed print identical reports.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .. import sampler
from ..losses import TaskLoss
from ..model import Example, ModelConfig, ModelParams, eos_index, nll, nll_and_grad
from ..oracles import (
    EnumerationSpec,
    enumerate_sequences,
    exact_expected_cost,
    exact_mgs_target,
    exact_pg_gradient,
    mrt_gradient_gold_split,
    mrt_gradient_oracle,
)
from ..autodiff import finite_difference_gradient
from ..trainers import MRT_CANDIDATES, mrt_candidate_set, mrt_gradient, pg_gradient, sample_sequences

SUITES = ("grad", "snis", "pg", "mrt")


@dataclass
class Check:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    bound: str = ""

    def line(self) -> str:
        vals = " ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {vals} ({self.bound})".rstrip()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3e}"
    return str(v)


def random_params(rng: np.random.Generator, vocab_size: int, emb: int, hidden: int, scale: float = 0.5) -> ModelParams:
    """Random model with weights large enough that gradients are not trivially small."""
    config = ModelConfig(vocab_size, emb, hidden)
    return ModelParams(config, rng.normal(0.0, scale, config.num_params))


def _random_seq(rng, content: int, lo: int, hi: int) -> list[int]:
    return [int(t) for t in rng.integers(0, content, size=int(rng.integers(lo, hi + 1)))]


def random_batch(rng, vocab_size: int, max_items: int = 3) -> list[Example]:
    eos = vocab_size - 1
    return [
        Example(_random_seq(rng, eos, 1, 4), _random_seq(rng, eos, 0, 3) + [eos])
        for _ in range(int(rng.integers(1, max_items + 1)))
    ]


# autodiff vs finite differences ------------------------------------------------------


def grad_instance(seed: int) -> float:
    """Relative error ||autodiff - fd|| / ||fd|| on one random (model, batch)."""
    rng = np.random.default_rng([seed, 101])
    V = int(rng.integers(3, 7))
    params = random_params(rng, V, int(rng.integers(2, 5)), int(rng.integers(2, 6)))
    batch = random_batch(rng, V)
    _, g = nll_and_grad(params, batch)
    fd = finite_difference_gradient(lambda th: nll(ModelParams(params.config, th), batch), params.flat)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-300))


def suite_grad(seed: int = 0, instances: int = 100) -> list[Check]:
    errs = [grad_instance(seed * 100_003 + i) for i in range(instances)]
    worst = max(errs)
    return [Check("grad.nll_vs_finite_differences", worst < 1e-4, {"instances": instances, "max_rel_err": worst}, "< 1e-4")]


# self-normalised importance sampling ------------------------------------------


@dataclass(frozen=True)
class QuadraticBowl:
    """C(theta) = 1/2 (theta - m)^T A (theta - m) on two parameters."""

    minimum: tuple = (1.0, -0.8)
    A: tuple = ((2.0, 0.5), (0.5, 1.0))

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        A = np.asarray(self.A)
        d = np.asarray(theta, dtype=np.float64) - np.asarray(self.minimum).reshape((2,) + (1,) * (np.ndim(theta) - 1))
        return 0.5 * (A[0, 0] * d[0] ** 2 + 2 * A[0, 1] * d[0] * d[1] + A[1, 1] * d[1] ** 2)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return np.asarray(self.A) @ (np.asarray(theta) - np.asarray(self.minimum))


@dataclass(frozen=True)
class SnisFixture:
    cost: QuadraticBowl = QuadraticBowl()
    theta: tuple = (0.0, 0.0)
    alpha: float = 10.0
    sigma2: float = 0.25
    pi: float = 0.5
    step: float = 0.5

    @property
    def mle_mean(self) -> np.ndarray:
        return -self.step * self.cost.grad(np.asarray(self.theta))

    def target(self) -> np.ndarray:
        return exact_mgs_target(self.cost, np.asarray(self.theta), self.alpha, self.mle_mean, self.sigma2)

    def estimate(self, K: int, seed: int) -> np.ndarray:
        """Delta_MGS from K proposal draws."""
        theta = np.asarray(self.theta)
        cfg = sampler.ProposalConfig(self.sigma2, self.pi)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, K])))
        mean = self.mle_mean
        deltas = np.array([sampler.sample_proposal(mean, cfg, rng)[0] for _ in range(K)])
        log_q = np.array([sampler.mixture_log_density(d, mean, cfg) for d in deltas])
        costs = self.cost((theta[:, None] + deltas.T))
        w = sampler.candidate_weights(float(self.cost(theta)), costs, log_q, self.alpha)
        return sampler.combine(deltas, w)


def snis_errors(fixture: SnisFixture, K: int, seeds, target=None) -> np.ndarray:
    """Per-seed, per-coordinate relative error of Delta_MGS against quadrature."""
    target = fixture.target() if target is None else target
    est = np.array([fixture.estimate(K, s) for s in seeds])
    return np.abs(est - target) / np.abs(target)


def weight_algebra(seed: int = 0, sets: int = 1000) -> list[Check]:
    rng = np.random.default_rng([seed, 202])
    alphas = (0.0, 0.1, 1.0, 10.0, 100.0)
    sum_err, range_ok, alpha0_err, cshift, qshift, mono_viol = 0.0, True, 0.0, 0.0, 0.0, 0
    for _ in range(sets):
        n = int(rng.integers(1, 9))
        base = float(rng.normal())
        costs = rng.normal(size=n)
        log_q = rng.normal(scale=5.0, size=n)
        for a in alphas:
            w = sampler.candidate_weights(base, costs, log_q, a)
            sum_err = max(sum_err, abs(float(w.sum()) - 1.0))
            range_ok &= bool(np.all((w >= 0) & (w <= 1)))
        w0 = sampler.candidate_weights(base, costs, log_q, 0.0)
        ref = np.exp(-log_q - np.max(-log_q))
        alpha0_err = max(alpha0_err, float(np.max(np.abs(w0 - ref / ref.sum()))))
        a = float(rng.uniform(0.1, 10))
        w = sampler.candidate_weights(base, costs, log_q, a)
        s = float(rng.normal(scale=3.0))
        cshift = max(cshift, float(np.max(np.abs(w - sampler.candidate_weights(base + s, costs + s, log_q, a)))))
        qshift = max(qshift, float(np.max(np.abs(w - sampler.candidate_weights(base, costs, log_q + s, a)))))
        best = int(np.argmin(costs))
        if n > 1 and np.sum(costs == costs[best]) == 1:
            grid = (0.0, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0)
            ws = [sampler.candidate_weights(base, costs, log_q, g)[best] for g in grid]
            mono_viol += int(any(b < a_ - 1e-12 for a_, b in zip(ws, ws[1:])))
    return [
        Check("weights.normalised", sum_err <= 1e-9 and range_ok, {"max_sum_err": sum_err, "in_unit_interval": range_ok}, "|sum-1| <= 1e-9"),
        Check("weights.alpha0_density_correction", alpha0_err < 1e-12, {"max_abs_diff": alpha0_err}, "< 1e-12"),
        Check("weights.cost_shift_invariance", cshift < 1e-12, {"max_abs_diff": cshift}, "< 1e-12"),
        Check("weights.density_shift_invariance", qshift < 1e-12, {"max_abs_diff": qshift}, "< 1e-12"),
        Check("weights.monotone_alpha", mono_viol == 0, {"sets": sets, "violations": mono_viol}, "no violations"),
    ]


def suite_snis(seed: int = 0, seeds: int = 20) -> list[Check]:
    fx = SnisFixture()
    target = fx.target()
    ids = [seed * 1000 + s for s in range(seeds)]
    medians = []
    for K in (100, 1000):
        medians.append(float(np.median(snis_errors(fx, K, ids, target).max(axis=1))))
    big = snis_errors(fx, 10_000, ids, target)
    medians.append(float(np.median(big.max(axis=1))))
    within = int(np.sum(np.all(big < 0.05, axis=1)))
    return [
        Check("snis.K1e4_vs_quadrature", within == seeds, {"seeds_within": f"{within}/{seeds}", "max_rel_err": float(big.max())}, "< 5% per coordinate, every seed"),
        Check(
            "snis.median_error_decreasing",
            medians[0] > medians[1] > medians[2],
            {"K1e2": medians[0], "K1e3": medians[1], "K1e4": medians[2]},
            "strictly decreasing",
        ),
    ] + weight_algebra(seed)


# policy gradient ----------------------------------------------------------------------


class ConstantLoss:
    """Task loss returning the same value for every hypothesis."""

    def __init__(self, value: float = 1.0):
        self.value = value

    def sequences(self, hyps, example, eos) -> np.ndarray:
        return np.full(len(hyps), self.value)


def pg_instance(seed: int, V: int = 3):
    rng = np.random.default_rng([seed, 303])
    params = random_params(rng, V, 3, 4)
    eos = V - 1
    X = _random_seq(rng, eos, 1, 3)
    Y = _random_seq(rng, eos, 1, 2) + [eos]
    return params, X, Y


def pg_monte_carlo(
    params: ModelParams, X, Y, loss: TaskLoss, samples: int, seed: int, max_len: int = 2, baseline_samples: int = 1000
) -> np.ndarray:
    """Mean of (c(Y_hat) - b) grad log p(Y_hat) over ancestral samples.

    b is the mean cost of an independent batch (step 1 of the same seed),
    standing in for the running baseline, so the estimator stays unbiased.
    ``baseline_samples=0`` uses b = 0.  Identical samples share one backward
    pass weighted by their count; the mean is unchanged.
    """
    ex = Example(X, Y)
    eos = eos_index(params.config)
    b = 0.0
    if baseline_samples:
        pilot = sample_sequences(params, [ex], baseline_samples, seed, 1, max_len)[0]
        b = float(np.mean(loss.sequences([o.tokens for o in pilot], ex, eos)))
    outs = sample_sequences(params, [ex], samples, seed, 0, max_len)[0]
    counts = Counter(o.tokens for o in outs)
    seqs = sorted(counts)
    costs = loss.sequences(seqs, ex, eos)
    weights = np.array([counts[s] for s in seqs], dtype=np.float64) / samples
    # pg_gradient averages over the sequences it is given, hence the len(seqs) factor
    return pg_gradient(params, [X] * len(seqs), seqs, (costs - b) * weights * len(seqs))


def pg_compare(mc: np.ndarray, exact: np.ndarray, floor: float = 1e-6):
    cos = float(mc @ exact / (np.linalg.norm(mc) * np.linalg.norm(exact)))
    big = np.abs(exact) > floor
    rel = np.abs(mc[big] - exact[big]) / np.abs(exact[big])
    return cos, rel


def suite_pg(seed: int = 0, instances: int = 5, samples: int = 100_000) -> list[Check]:
    spec = EnumerationSpec(3, 2)
    loss = TaskLoss("edit")
    cos_min, rel_max, bad, total, zero_max, fd_max = 1.0, 0.0, 0, 0, 0.0, 0.0
    for i in range(instances):
        params, X, Y = pg_instance(seed * 1000 + i)
        exact = exact_pg_gradient(params, X, Y, loss, spec)
        cos, rel = pg_compare(pg_monte_carlo(params, X, Y, loss, samples, seed * 1000 + i), exact)
        cos_min, rel_max = min(cos_min, cos), max(rel_max, float(rel.max()))
        bad += int(np.sum(rel >= 0.02))
        total += rel.size
        zero_max = max(zero_max, float(np.abs(exact_pg_gradient(params, X, Y, ConstantLoss(0.7), spec)).max()))
        fd = finite_difference_gradient(
            lambda th: exact_expected_cost(ModelParams(params.config, th), X, Y, loss, spec), params.flat
        )
        fd_max = max(fd_max, float(np.linalg.norm(exact - fd) / np.linalg.norm(fd)))
    # the sampled estimator itself: a baseline equal to the constant cancels every term
    params, X, Y = pg_instance(seed * 1000)
    mc_zero = float(np.abs(pg_monte_carlo(params, X, Y, ConstantLoss(0.7), 10_000, seed * 1000)).max())
    return [
        Check("pg.monte_carlo_cosine", cos_min > 0.999, {"instances": instances, "samples": samples, "min_cosine": f"{cos_min:.7f}"}, "> 0.999"),
        Check(
            "pg.monte_carlo_per_coordinate",
            bad == 0,
            {"coords_over_2pct": f"{bad}/{total}", "max_rel_err": rel_max},
            "< 2% where |exact| > 1e-6",
        ),
        Check("pg.constant_cost_zero", max(zero_max, mc_zero) < 1e-12, {"exact_max_abs": zero_max, "sampled_max_abs": mc_zero}, "< 1e-12"),
        Check("pg.exact_vs_fd_expected_cost", fd_max < 1e-4, {"max_rel_err": fd_max}, "< 1e-4"),
    ]


# minimum risk training ----------------------------------------------------------------


def mrt_instance(seed: int, strategy: str):
    rng = np.random.default_rng([seed, 404])
    V = int(rng.integers(3, 6))
    params = random_params(rng, V, 3, 4, scale=0.3)
    eos = V - 1
    ex = Example(_random_seq(rng, eos, 1, 4), _random_seq(rng, eos, 1, 4) + [eos])
    samples = [o.tokens for o in sample_sequences(params, [ex], 4, seed, 0, 6)[0]]
    S = mrt_candidate_set(params, ex, samples, strategy, 6)
    alpha = float(rng.uniform(0.1, 2.0))
    return params, ex, S, alpha


def mrt_differences(seed: int, strategy: str) -> tuple[float, float | None]:
    """Max |autodiff - formula|, and the gold-split form's when gold is in S."""
    params, ex, S, alpha = mrt_instance(seed, strategy)
    loss = TaskLoss("edit")
    costs = loss.sequences(S, ex, eos_index(params.config))
    _, auto = mrt_gradient(params, [(ex.X, S, costs)], alpha)
    oracle = mrt_gradient_oracle(params, ex.X, ex.Y, S, alpha, loss)
    diff = float(np.max(np.abs(auto - oracle)))
    gold = None
    if tuple(ex.Y) in S:
        gold = float(np.max(np.abs(auto - mrt_gradient_gold_split(params, ex.X, ex.Y, S, alpha, loss))))
    return diff, gold


def suite_mrt(seed: int = 0, instances: int = 50) -> list[Check]:
    out = []
    for strategy in MRT_CANDIDATES:
        diffs, golds = [], []
        for i in range(instances):
            d, g = mrt_differences(seed * 1000 + i, strategy)
            diffs.append(d)
            if g is not None:
                golds.append(g)
        worst = max(diffs + golds)
        out.append(
            Check(
                f"mrt.autodiff_vs_formula[{strategy}]",
                worst < 1e-6,
                {"instances": instances, "max_abs_diff": worst, "gold_split_checked": len(golds)},
                "< 1e-6",
            )
        )
    return out


def enumeration_mass(seed: int = 0, models: int = 100) -> float:
    """Worst |sum of enumerated probabilities - 1| over random models."""
    worst = 0.0
    for i in range(models):
        rng = np.random.default_rng([seed, i, 505])
        V = int(rng.integers(2, 5))
        params = random_params(rng, V, 3, 4, scale=1.0)
        seqs = enumerate_sequences(params, _random_seq(rng, max(V - 1, 1), 1, 3), EnumerationSpec(V, int(rng.integers(1, 5))))
        worst = max(worst, abs(sum(p for _, p, _ in seqs) - 1.0))
    return worst


_RUNNERS = {"grad": suite_grad, "snis": suite_snis, "pg": suite_pg, "mrt": suite_mrt}


def run_verify(suite: str = "all", seed: int = 0, emit=print) -> bool:
    names = SUITES if suite == "all" else (suite,)
    if any(n not in _RUNNERS for n in names):
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES + ('all',)}")
    ok = True
    for name in names:
        checks = _RUNNERS[name](seed)
        passed = all(c.passed for c in checks)
        ok &= passed
        for c in checks:
            emit(c.line())
        emit(f"{'PASS' if passed else 'FAIL'} suite {name}")
    return ok
