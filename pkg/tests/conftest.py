import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crowdbelief.domain import Dataset, QuestionPanel
from crowdbelief.synth import SynthConfig, generate_dataset

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def random_panel(rng, qid="q", T=None, max_per_day=3, n_groups=3, empty_rate=0.3, outcome=None):
    T = T or int(rng.integers(2, 6))
    days, groups, ys = [], [], []
    for t in range(1, T + 1):
        if rng.random() < empty_rate:
            continue
        n = int(rng.integers(1, max_per_day + 1))
        days += [t] * n
        groups += rng.integers(1, n_groups + 1, n).tolist()
        ys += rng.normal(0, 1.5, n).tolist()
    z = int(rng.integers(0, 2)) if outcome is None else outcome
    return QuestionPanel.from_logits(qid, T, z, days, groups, ys)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_synth():
    ds, truths = generate_dataset(SynthConfig(horizon=21, n_questions=12, experts_per_group=3), 11)
    return ds, truths


@pytest.fixture
def toy_dataset():
    p1 = QuestionPanel.from_probs("a", 4, 1, [1, 1, 2, 4], [1, 2, 1, 2], [0.6, 0.7, 0.65, 0.9])
    p2 = QuestionPanel.from_probs("b", 3, 0, [1, 2, 3], [2, 1, 2], [0.4, 0.3, 0.2])
    return Dataset((p1, p2), n_groups=2)


# (name, passed, detail) lines filled in by test_acceptance
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
