import numpy as np
import pytest

from stum.backbone import BackboneSpec
from stum.data import SynthConfig, prepare, synth_generate
from stum.model import StumConfig, build_model


def tiny_config(**overrides) -> StumConfig:
    base = dict(input_len=4, horizon=3, embed_dim=4, num_mlrf=1, astucs_per_block=2,
                backbone=BackboneSpec("mlp", [8]), seed=0, dtype="float64")
    base.update(overrides)
    return StumConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    series, graph = synth_generate(SynthConfig(nodes=5, frames=120, regions=2, seed=3))
    return series, graph, prepare(series)


@pytest.fixture
def tiny_model(tiny_data):
    _, _, data = tiny_data
    return build_model(tiny_config(), data.nodes, data.channels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance summary: one line per criterion, printed after the run
ACCEPTANCE: list[tuple[int, str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{status}] {number:>2}. {title}: {detail}")
