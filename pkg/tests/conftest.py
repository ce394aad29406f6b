"""
Pytest configuration and fixtures for test suite.

This file ensures proper path configuration for imports and provides the
small scenario and toy configurations shared by the tests.
"""
import os
import sys
from pathlib import Path

import pytest
from dotenv import load_dotenv

# Add project root to Python path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root)) #for adding the project root to the Python path

load_dotenv()

# Full-length simulations and training runs take minutes
RUN_SLOW = os.getenv("VOLTREACH_RUN_SLOW", "").lower() in ("1", "true", "yes")
REQUIRES_LONG_RUN = pytest.mark.skipif(
    not RUN_SLOW,
    reason="long run; set VOLTREACH_RUN_SLOW=1 to enable"
)

from voltreach.models import EpisodeConfig, GridSpec, ScenarioConfig, ToyConfig  # noqa: E402


@pytest.fixture
def scenario():
    """Reference scenario on a coarser integration step"""
    return ScenarioConfig(h_int=0.05)


@pytest.fixture
def short_episode():
    """Two decision steps, trip at reset, no demand noise"""
    return EpisodeConfig(horizon=20.0, horizon_max=20.0, h_int=0.05, demand_sigma_mw=0.0, ratio_sigma=0.0)


@pytest.fixture
def toy():
    return ToyConfig()


@pytest.fixture
def grid():
    return GridSpec()
