import os

import hypothesis
import numpy as np
import pytest

from eiss.classifier import Classifier

hypothesis.settings.register_profile("default", max_examples=60, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    from acceptance_registry import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        title, ok, detail = RESULTS[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")


class FixedClassifier(Classifier):
    """Returns the same probability vector for every input."""

    def __init__(self, probs, input_size=(8, 8)):
        self.probs = np.asarray(probs, dtype=np.float64)
        self.class_count = len(self.probs)
        self.input_width, self.input_height = input_size
        self.calls = []

    def predict(self, batch):
        self.calls.append(batch.shape)
        return np.tile(self.probs, (len(batch), 1))


@pytest.fixture
def fixed_classifier():
    return FixedClassifier
