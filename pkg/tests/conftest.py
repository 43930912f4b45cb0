import numpy as np
import pytest

from mape_unlearn.data import TaskParams, gen_synthetic
from mape_unlearn.tinyformer import Batch, ModelConfig, init_model

SMALL = ModelConfig(num_layers=2, num_heads=2, d_model=8, d_ff=6, vocab_size=12,
                    num_classes=4, max_seq_len=6, seed=3)


def random_batch(cfg, n, seed=0, seq_len=None):
    rng = np.random.default_rng(seed)
    L = seq_len or cfg.max_seq_len
    tokens = rng.integers(0, cfg.vocab_size, size=(n, L))
    labels = rng.integers(0, cfg.num_classes - 1, size=n)
    return Batch(tokens, labels, np.arange(100, 100 + n))


def perturbed(state, scale=0.3, seed=0):
    """A model whose LayerNorm/bias parameters are not at their init values."""
    rng = np.random.default_rng(seed)
    out = state.copy()
    for k, v in out.params.items():
        v += scale * rng.standard_normal(v.shape) * (1.0 if v.ndim == 1 else 0.2)
    return out


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_state():
    return perturbed(init_model(SMALL))


@pytest.fixture
def small_batch():
    return random_batch(SMALL, 7)


TINY_TASK = TaskParams(num_train=120, num_test=40, num_forget=12, seq_len=8, vocab_size=16,
                       num_content_classes=3, alphabet_size=3, motif_len=2, distractors=2)
TINY_MODEL = ModelConfig(num_layers=1, num_heads=2, d_model=8, d_ff=6, vocab_size=16,
                         num_classes=4, max_seq_len=8, seed=0)


@pytest.fixture(scope="session")
def tiny_bundle():
    return gen_synthetic(TINY_TASK, 5)


# one line per acceptance criterion, repeated in the terminal summary
CRITERIA_LINES = []


def report_criterion(number, ok, detail):
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
