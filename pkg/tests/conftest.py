import os
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_configure(config):
    # keep BLAS single-threaded so timings and reductions are reproducible
    from threadpoolctl import threadpool_limits

    threadpool_limits(limits=int(os.environ.get("SATFORGE_THREADS", "1")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    from satforge.synth_data import CorpusConfig

    return CorpusConfig(
        feat_dim=6, num_classes=4, num_speakers=10, dev_speakers=2, eval_speakers=2,
        utts_per_speaker=6, min_frames=20, max_frames=60, seed=3,
    )


@pytest.fixture(scope="session")
def tiny_corpus(tiny_config):
    from satforge.synth_data import gen_corpus

    return gen_corpus(tiny_config)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].split("-")[1])):
            terminalreporter.write_line(line)
