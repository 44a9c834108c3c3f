import time
from dataclasses import replace

import pytest

from snncl.continual import RunConfig
from snncl.data import synth_generate
from snncl.harness import prepare_experiment, run_experiment

# desk benchmark: 8 classes, the last one held out for the continual phase
BENCH_CLASSES = 8
BENCH_SAMPLES = 64
BENCH_CHANNELS = 48


class Benchmark:
    """Lazily computed, shared runs on the synthetic benchmark."""

    def __init__(self):
        self.dataset = synth_generate(BENCH_CLASSES, BENCH_SAMPLES, BENCH_CHANNELS, seed=0)
        self.cfg = RunConfig()
        self._prepared = None
        self._runs = {}
        self.seconds = {}  # wall time of each computed stage

    @property
    def prepared(self):
        if self._prepared is None:
            start = time.perf_counter()
            self._prepared = prepare_experiment(self.cfg, self.dataset)
            self.seconds["pretrain"] = time.perf_counter() - start
        return self._prepared

    def run(self, mode, **overrides):
        key = (mode, tuple(sorted(overrides.items())))
        if key not in self._runs:
            cfg = replace(self.cfg, **overrides)
            prepared = self.prepared
            start = time.perf_counter()
            self._runs[key] = run_experiment(cfg, self.dataset, mode, prepared=prepared,
                                             figures=False)
            self.seconds[key] = time.perf_counter() - start
        return self._runs[key]

    def run_seconds(self, mode, **overrides):
        self.run(mode, **overrides)
        return self.seconds[(mode, tuple(sorted(overrides.items())))]

    def all_runs(self):
        return list(self._runs.values())


@pytest.fixture(scope="session")
def bench():
    return Benchmark()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
