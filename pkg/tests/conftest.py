from __future__ import annotations

import numpy as np
import pytest

from foliscope_app.singularity_lab import SectorModel

# eta = i, -1 + i and 1 + i open sectors with gamma 2, 4 and 4/3
SECTOR_ETAS = (1j, -1 + 1j, 1 + 1j)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240607)


@pytest.fixture(params=SECTOR_ETAS, ids=["gamma2", "gamma4", "gamma4_3"])
def sector_model(request) -> SectorModel:
    return SectorModel(request.param)


@pytest.fixture
def square_model() -> SectorModel:
    return SectorModel(1j)
