"""Test configuration for the FedSIS lab."""

from __future__ import annotations

import os

import pytest

from helpers import tiny_domains, tiny_model

# Environment defaults would leak into load_config; keep tests hermetic.
for _name in ("FEDSIS_OUTPUT_DIR", "FEDSIS_PRECISION", "ENV_FILE"):
    os.environ.pop(_name, None)


@pytest.fixture
def model_config():
    return tiny_model()


@pytest.fixture(scope="session")
def domains():
    return tiny_domains()
