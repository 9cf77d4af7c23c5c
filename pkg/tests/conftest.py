import numpy as np
import pytest

from probret.data import SynthSpec, generate

ACCEPTANCE_LINES = {}


def record(criterion: int, ok: bool, detail: str):
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


SMALL_SPEC = SynthSpec(num_queries=(6, 12, 30), mean_items=(80, 15, 5), noise_items=2000, seed=3)


@pytest.fixture(scope="session")
def small_corpus():
    return generate(SMALL_SPEC)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_unit(rng, shape):
    x = rng.standard_normal(shape)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)
