import numpy as np
import pytest

from dpq import model as M
from dpq import quant as Q
from dpq import sensitivity as S
from dpq.corpus import generate_text, sample_chunks


TOY = M.ModelConfig(n_blocks=2, d_model=32, n_heads=4, d_ff=64, seq_cap=64)


@pytest.fixture(scope="session")
def toy_weights():
    return M.init_model(0, TOY)


@pytest.fixture(scope="session")
def toy_store(toy_weights):
    return Q.quantize_model(toy_weights, 6, 3)


@pytest.fixture(scope="session")
def toy_tokens():
    text = generate_text(0, 4096)
    return np.frombuffer(text.encode(), dtype=np.uint8).astype(np.int64)


@pytest.fixture(scope="session")
def toy_calib(toy_tokens):
    return sample_chunks(toy_tokens, 24, 8, seed=0)


@pytest.fixture(scope="session")
def toy_profile(toy_weights, toy_store, toy_calib):
    return S.profile(toy_weights, toy_store, toy_calib)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed"):
        for rep in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" in getattr(rep, "nodeid", ""):
                name = rep.nodeid.split("::")[-1]
                lines.append((name, status.upper().replace("ED", "")))
    if lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for name, status in sorted(lines):
            terminalreporter.write_line(f"{status}: {name}")
