"""Shared fixtures: tiny benchmarks sized so training-backed tests stay fast.

Also hosts the acceptance-verdict ledger: ``test_acceptance`` appends one
line per criterion and ``pytest_terminal_summary`` prints them after the
run, outside output capture.
"""

from __future__ import annotations

import numpy as np
import pytest

from driftadapt.datasets import BenchmarkSpec, make_benchmark_task, make_drift_benchmark

ACCEPTANCE_VERDICTS = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_VERDICTS:
            terminalreporter.write_line(line)


def tiny_image_spec(**overrides) -> BenchmarkSpec:
    base = dict(
        modality="image",
        class_count=2,
        per_class=24,
        drift=0.6,
    )
    base.update(overrides)
    return BenchmarkSpec(**base)


def tiny_dual_spec(**overrides) -> BenchmarkSpec:
    base = dict(
        modality="dual",
        class_count=2,
        per_class=24,
        drift=0.6,
    )
    base.update(overrides)
    return BenchmarkSpec(**base)


@pytest.fixture(scope="session")
def tiny_image_task():
    return make_benchmark_task(tiny_image_spec(), seed=11)


@pytest.fixture(scope="session")
def tiny_dual_task():
    return make_benchmark_task(tiny_dual_spec(), seed=12)


@pytest.fixture(scope="session")
def tiny_pair():
    source, target = make_drift_benchmark(tiny_image_spec(), seed=13)
    return source, target


@pytest.fixture()
def rng():
    return np.random.default_rng(707)
