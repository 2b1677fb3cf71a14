import pytest
from helpers import ACCEPTANCE_LINES

from rccmnet.model import ModelConfig
from rccmnet.synthdata import DatasetSplit, PhantomConfig, generate_dataset, split_dataset
from rccmnet.training import TrainConfig

# small images so the training tests run in seconds
TINY_PHANTOM = PhantomConfig(image_height=32, image_width=48, pixel_spacing=0.25, area_range=(3.0, 8.0), seed=1)
TINY_MODEL = ModelConfig(depth=3, base_channels=4, input_shape=(1, 32, 48))


@pytest.fixture(scope="session")
def tiny_samples():
    return generate_dataset(TINY_PHANTOM, (3, 4, 3))


@pytest.fixture(scope="session")
def tiny_split(tiny_samples):
    return split_dataset(tiny_samples, seed=0)


@pytest.fixture(scope="session")
def tiny_train_only(tiny_samples):
    return DatasetSplit(train=tiny_samples, val=[], test=[], split_seed=0)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=3, batch_size=4, lr=3e-3, seed=0, model=TINY_MODEL)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
