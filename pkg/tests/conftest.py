import numpy as np
import pytest

from qcrec.cli import perturbed_params
from qcrec.model import ModelConfig

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool | None, detail: str = "") -> None:
    """``passed=None`` records a criterion that could not be run."""
    status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] {criterion}: {detail}")
    print(f"[{status}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_config(variant="none", visibility="full", **kw) -> ModelConfig:
    base = dict(N=6, D=4, H=2, n_heads=2, vocab_items=10, vocab_contexts=5)
    base.update(kw)
    return ModelConfig(**base).with_mode(variant, visibility)


def tiny_params(config, seed=0):
    return perturbed_params(config, np.random.default_rng(seed))
