import numpy as np
import pytest

from digrec.data import SyntheticWorldConfig, generate_synthetic, temporal_split
from digrec.model import TrainConfig


def micro_config(**kw) -> TrainConfig:
    base = dict(L=2, K=4, d=8, d_c=6, enc_hidden=8, mixer_hidden=(8,), u2t_hidden=8,
                batch_size=64, epochs=1, neg_per_pos=2, beam_width=8, top_n=20,
                eval_users=40, kmeans_rounds=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_world():
    """A few hundred users over a 16-item catalog; cheap enough for per-test training."""
    return generate_synthetic(SyntheticWorldConfig(n_users=300, n_items=16, exposures_per_user=20,
                                                   seed=3))


@pytest.fixture(scope="session")
def tiny_split(tiny_world):
    return temporal_split(tiny_world.log)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Remember a verdict line; printed immediately and again in the terminal summary."""
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
