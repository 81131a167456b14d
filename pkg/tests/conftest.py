"""
Shared fixtures for the Aulos tests.
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from core.event_analysis import analyze_program
from core.mini_ir import load_program
from core.pipeline import train_for_scenario

PROGRAMS = ROOT / "programs"
FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def programs_dir() -> Path:
    return PROGRAMS


@pytest.fixture(scope="session")
def syringe():
    return load_program(PROGRAMS / "syringe_pump.ir")


@pytest.fixture(scope="session")
def syringe_analysis(syringe):
    return analyze_program(syringe)


@pytest.fixture(scope="session")
def solard():
    return load_program(PROGRAMS / "solard.ir")


@pytest.fixture(scope="session")
def solard_analysis(solard):
    return analyze_program(solard)


@pytest.fixture(scope="session")
def nested():
    return load_program(FIXTURES / "nested_events.ir")


@pytest.fixture(scope="session")
def nested_analysis(nested):
    return analyze_program(nested)


@pytest.fixture(scope="session")
def syringe_efsa():
    """eFSA trained on the threshold-40 syringe sweep."""
    return train_for_scenario("syringe_normal")


@pytest.fixture(scope="session")
def intensity_efsa():
    """eFSA trained on the threshold-30 syringe sweep, with a fitted push loop."""
    return train_for_scenario("syringe_intensity_normal")


@pytest.fixture(scope="session")
def solard_efsa():
    return train_for_scenario("solard_normal")
