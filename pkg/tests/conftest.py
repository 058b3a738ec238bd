import numpy as np
import pytest

from ragscope.model import ModelConfig, init_weights


@pytest.fixture
def small_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=8, d_ffn=16, vocab_size=11, max_seq_len=16, rng_seed=3)


@pytest.fixture
def small_weights(small_config):
    return init_weights(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    from cli_chain import run_chain

    d = tmp_path_factory.mktemp("cli_a")
    return d, run_chain(d)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
