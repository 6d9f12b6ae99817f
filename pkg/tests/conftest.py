import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedapt.encoders import DualEncoder, EncoderConfig, FrozenWeights, init_weights

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = EncoderConfig(d_text=8, d_vis=8, d_shared=8, layers_total=2, J=2, heads=2, m=2,
                     patch_size=4, image_size=8, channels=3, token_len=3, vocab=16)


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_encoder64():
    w = FrozenWeights(TINY, init_weights(TINY, seed=3, dtype=np.float64))
    return DualEncoder(w)


@pytest.fixture(scope="session")
def tiny_encoder32():
    return DualEncoder(FrozenWeights(TINY, init_weights(TINY, seed=3)))


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
