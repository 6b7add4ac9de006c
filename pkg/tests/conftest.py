import numpy as np
import pytest

from qcqa.attnsim import synth_layer
from qcqa.core import LayerWeights, WeightArchive

ACCEPTANCE_LINES: list[str] = []


def random_layer(num_heads, seed, d_k=4, d_v=4, d_model=8) -> LayerWeights:
    rng = np.random.default_rng(seed)
    return LayerWeights(
        rng.standard_normal((num_heads, d_k, d_model)),
        rng.standard_normal((num_heads, d_v, d_model)),
    )


@pytest.fixture
def layer6():
    return random_layer(6, 1234)


@pytest.fixture
def toy_archive():
    return WeightArchive([synth_layer(6, 8, 4, 8, 100 + i).weights for i in range(4)])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
