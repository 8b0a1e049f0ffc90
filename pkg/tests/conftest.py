"""Shared fixtures. Heavy artifacts (rendered datasets, trained networks)
are session-scoped so the suite pays for them once."""

from __future__ import annotations

import numpy as np
import pytest

from sarekit.conditioning import HashTextEncoder
from sarekit.schedule import default_schedule
from sarekit.toyworld import IdentityCodec, make_dataset


@pytest.fixture(scope="session")
def schedule():
    return default_schedule()


@pytest.fixture(scope="session")
def encoder():
    return HashTextEncoder()


@pytest.fixture(scope="session")
def codec():
    return IdentityCodec()


@pytest.fixture(scope="session")
def toy_small(tmp_path_factory):
    """Tiny rendered world (6 real + 6 fake) for plumbing tests."""
    root = tmp_path_factory.mktemp("toy_small")
    return make_dataset(6, 6, 1.0, 123, root)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def random_image(rng: np.random.Generator, h: int = 16, w: int = 16) -> np.ndarray:
    return rng.random((3, h, w), dtype=np.float32)
