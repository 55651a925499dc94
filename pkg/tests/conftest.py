import numpy as np
import pytest

from acpo import data as ds
from acpo.diffusion import build_predictor, make_schedule
from acpo.iqa import ScorerConfig, build_scorer

# lines appended by test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_sched():
    return make_schedule(12, 1e-3, 0.2)


@pytest.fixture
def tiny_net(tiny_sched):
    return build_predictor(tiny_sched, (8, 8), (12,), temb_dim=4, seed=3)


@pytest.fixture
def tiny_cond_net(tiny_sched):
    return build_predictor(tiny_sched, (8, 8), (12,), temb_dim=4, num_classes=4, cond_dim=3, seed=4)


@pytest.fixture
def two_stream():
    s = build_scorer(ScorerConfig("two-stream", image_size=8, stream_width=4, fuse_width=4), seed=1)
    s.freeze()
    return s


@pytest.fixture
def conditional():
    s = build_scorer(ScorerConfig("conditional", image_size=8, grid=2, token_width=5, embed_width=4), seed=2)
    s.freeze()
    return s


@pytest.fixture
def clean8():
    return np.stack([ds.render_clean(i % 4, 8, i) for i in range(16)])
