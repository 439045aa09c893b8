import numpy as np
import pytest

from cirm.model import ModelConfig, init_model


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(vocab_size=256, d_model=16, n_layers=2, n_heads=2, d_ff=24, max_seq_len=128, init_seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    return init_model(tiny_config)


@pytest.fixture(scope="session")
def noisy_model(tiny_config):
    """Larger weights than the default init so activations differ visibly between inputs."""
    m = init_model(tiny_config)
    rng = np.random.default_rng(11)
    params = {k: (v if k.endswith("norm") else rng.normal(0.0, 0.3, size=v.shape)) for k, v in m.params.items()}
    return type(m)(m.config, params)


def random_tokens(rng, n, vocab=256):
    return rng.integers(0, vocab, size=n)


_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[number] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
