import numpy as np
import pytest

from presgan.diffcore import MlpSpec, init_mlp
from presgan.models import GeneratorParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_generator(rng, latent=3, data=2, hidden=(5, 4), log_sigma=None, activation="tanh"):
    spec = MlpSpec((latent, *hidden, data), hidden_activation=activation)
    ls = rng.normal(-0.5, 0.2, size=data) if log_sigma is None else np.full(data, float(log_sigma))
    return GeneratorParams(spec, init_mlp(spec, rng), ls)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(cid: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {cid}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
