import numpy as np
import pytest

from stjema.config import TrainConfig
from stjema.signal import SynthConfig, synth_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """24 subjects, 8 ROIs, 60 timepoints."""
    return synth_dataset(SynthConfig(n_subjects=24, N=8, T_max=60, seed=3))


@pytest.fixture
def tiny_cfg():
    return TrainConfig.for_phase(
        "pretrain", n_nodes=8, window=12, stride=4, alpha_min=0.15, alpha_max=0.3,
        steps=4, batch_size=3, d_eta=4, d_v=6, d_enc=6, gin_layers=2, gin_hidden=8,
        token_hidden=4, channel_hidden=8,
    )


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}")
