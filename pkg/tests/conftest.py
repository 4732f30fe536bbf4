import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pjitai.domain import ContextVector, DecisionRecord, binary_schema

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def make_records(actions, rewards, contexts=None, days=None, pids=None):
    """DecisionRecords for a one-variable binary schema unless contexts are given."""
    n = len(actions)
    contexts = contexts or [("weekday",)] * n
    days = days or [0] * n
    pids = pids or ["p0"] * n
    return [
        DecisionRecord(pids[i], i, days[i], ContextVector(contexts[i]), 0.5, int(actions[i]), int(rewards[i]))
        for i in range(n)
    ]


@pytest.fixture
def schema1():
    return binary_schema(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for text in mod.summary_lines():
        terminalreporter.write_line(text)
