import numpy as np
import pytest
from hypothesis import settings

from rankbench.dataio import PredictionTable, ResponseTable

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


def table_from_matrix(Y, prefix_d="d", prefix_c="c"):
    Y = np.asarray(Y, dtype=float)
    drugs = [f"{prefix_d}{i:03d}" for i in range(Y.shape[0])]
    cells = [f"{prefix_c}{j:03d}" for j in range(Y.shape[1])]
    return ResponseTable.from_matrix(drugs, cells, Y)


def predictions_like(truth, values):
    return PredictionTable(truth.drug_ids, truth.cell_ids, values)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
