import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from layertie.model import ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=16,
                       context_length=8, seed=0, dtype="float64")


@pytest.fixture
def tiny_batch(tiny_cfg):
    from layertie.data import Batch
    import torch

    g = torch.Generator().manual_seed(123)
    w = torch.randint(0, tiny_cfg.vocab_size, (2, 7), generator=g)
    return Batch(w[:, :-1], w[:, 1:])


def tiny_run_config(mode="dynamic", steps=30, period=5, seed=0, n_layers=3, **trainer):
    """A run small enough to train in well under a second."""
    from layertie.config import DataConfig, RunConfig, TrainerConfig
    from layertie.qcontrol import ControllerConfig

    return RunConfig(
        model=ModelConfig(n_layers=n_layers, d_model=16, n_heads=2, d_ffn=32,
                          context_length=16, seed=seed),
        trainer=TrainerConfig(mode=mode, steps=steps, controller_period=period, batch_size=4,
                              lr=1e-3, seed=seed, eval_every=10, max_eval_batches=2,
                              **trainer),
        controller=ControllerConfig(seed=seed),
        data=DataConfig(path="data/shakespeare.txt"),
    ).validate()


@pytest.fixture(scope="session")
def corpus():
    from layertie.data import load_corpus

    return load_corpus("data/shakespeare.txt", 0.1, 64)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
