import numpy as np
import pytest
import torch

from fdvae.config import DatasetConfig, ExperimentConfig, TrainSchedule, baseline_config
from fdvae.datasets import SyntheticSpec, generate_synthetic
from fdvae.losses import LossWeights

DATA = __import__("pathlib").Path(__file__).parent / "data"


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(n_train=128, n_val=32, n_test=32, rho=0.8, seed=3)


@pytest.fixture(scope="session")
def tiny_splits(tiny_spec):
    return generate_synthetic(tiny_spec)


def tiny_config(variant="fdvae", epochs=1, batch_size=32, spec=None, **ablation) -> ExperimentConfig:
    """Small, fast config on the tiny synthetic dataset."""
    base = ExperimentConfig(
        weights=LossWeights(),
        schedule=TrainSchedule(repr_epochs=epochs, downstream_epochs=2, repr_lr=1e-3,
                               downstream_lr=1e-2, batch_size=batch_size),
        dataset=DatasetConfig(synthetic=spec or SyntheticSpec(n_train=128, n_val=32, n_test=32, seed=3)),
        seeds=[0],
    )
    return baseline_config(variant, base, **ablation)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
