from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from damagelab.dataset import GeneratorConfig, default_regions, generate_dataset  # noqa: E402
from damagelab.presets import train_config  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset():
    """Three regions of 10 tiles at 32x32."""
    return generate_dataset(default_regions(3, 10), 7, GeneratorConfig(tile_size=32))


@pytest.fixture(scope="session")
def desk_train():
    return train_config("desk", epochs=3)
