import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mgslab.model import Example, ModelConfig, ModelParams

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_model(seed, vocab_size=4, emb=3, hidden=4, scale=0.5):
    rng = np.random.default_rng(seed)
    config = ModelConfig(vocab_size, emb, hidden)
    return ModelParams(config, rng.normal(0.0, scale, config.num_params))


def uniform_model(vocab_size=4, emb=3, hidden=4, seed=0):
    """Random recurrent weights, zero output projection: every step is uniform."""
    p = random_model(seed, vocab_size, emb, hidden)
    named = p.unflatten(p.flat)
    named["w_out"] = np.zeros_like(named["w_out"])
    named["b_out"] = np.zeros_like(named["b_out"])
    return ModelParams(p.config, p.flatten(named))


def forced_model(table):
    """A bigram model: the next-token logits are ``table[previous token]``.

    Update gates are saturated shut (z = 0) and recurrent weights are zero,
    so the state is tanh of the previous token's one-hot embedding.  eos
    doubles as the begin token, so row ``eos`` gives the first-step logits.
    """
    table = np.asarray(table, dtype=np.float64)
    V = table.shape[0]
    config = ModelConfig(V, V, V)
    c = 3.0
    named = {
        "b_gates": np.concatenate([np.full(V, -60.0), np.zeros(2 * V)]),
        "b_out": np.zeros(V),
        "emb": c * np.eye(V),
        "w_hidden": np.zeros((V, 3 * V)),
        "w_input": np.concatenate([np.zeros((V, 2 * V)), np.eye(V)], axis=1),
        "w_out": table / np.tanh(c),
    }
    flat = np.concatenate([named[k].ravel() for k in sorted(named)])
    return ModelParams(config, flat)


@pytest.fixture
def tiny():
    return random_model(0)


@pytest.fixture
def tiny_batch():
    return [Example([0, 1], [1, 2, 3]), Example([2], [0, 3]), Example([1, 1, 2], [3])]


# acceptance reporting: one PASS/FAIL line per criterion, printed after the run

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE[number] = f"{'PASS' if passed else 'FAIL'} criterion {number} {name}: {detail}"
        print(ACCEPTANCE[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
