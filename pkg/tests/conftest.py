import time

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


SEEDS = (0, 1, 2)


class RunCache:
    """Memoised 100-epoch synthetic runs keyed by (variant, seed), shared across modules."""

    def __init__(self):
        self.runs = {}
        self.seconds = {}

    def __call__(self, variant, seed):
        from sdpl.experiments import train_run, variant_config

        key = (variant, seed)
        if key not in self.runs:
            t0 = time.perf_counter()
            self.runs[key] = train_run(variant_config(variant), seed=seed)
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key]


@pytest.fixture(scope="session")
def trained():
    return RunCache()


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda l: int(l.split()[2])):
            terminalreporter.write_line(line)
