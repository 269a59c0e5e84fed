import numpy as np
import pytest

from mohawk.model import ModelConfig, init_teacher


def jitter(params, seed, scale):
    rng = np.random.default_rng(seed)
    return {k: v + rng.normal(0.0, scale, v.shape) for k, v in params.items()}


@pytest.fixture
def small_cfg():
    return ModelConfig(vocab_size=13, d_model=16, n_layers=2, n_heads=2, d_mlp=32, max_seq_len=12)


@pytest.fixture
def small_teacher(small_cfg):
    # larger-than-init weights so attention is far from uniform
    t = init_teacher(small_cfg, 3)
    t.params = jitter(t.params, 3, 0.3)
    return t


_acceptance_lines: dict = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per criterion; shown in the terminal summary."""

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _acceptance_lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for n in range(1, max(10, max(_acceptance_lines)) + 1):
            terminalreporter.write_line(_acceptance_lines.get(n, f"criterion {n:2d}: NO RESULT  (deselected, or the test errored before reporting)"))
