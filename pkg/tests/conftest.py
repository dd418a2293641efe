import os

import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=100)
settings.register_profile("thorough", deadline=None, max_examples=1000)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

# Worked example, the word "was": unit ids of one accented utterance.
WAS_INPUT = [7, 345, 181, 181, 181, 181, 468, 406, 406, 467, 356, 356, 356, 281, 281, 453, 9, 9]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, repeated at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
