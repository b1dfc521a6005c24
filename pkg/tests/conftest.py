import numpy as np
import pytest
from hypothesis import settings

from starmaps.ingest import annotate_uniform
from starmaps.scenes import demo_town
from starmaps.uam import sample_collection

settings.register_profile("default", deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def town():
    return demo_town()


@pytest.fixture(scope="session")
def town_collection(town):
    return sample_collection(annotate_uniform(town, 10.0), 50, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


AIRSPACE_RULES = """\
% valid airspace for a drone near a pilot
airspace(X) :- over(X, park).
airspace(X) :- distance(X, road) < 15, distance(X, pilot) < 250.
"""

AIRSPACE_FACTS = """\
0.3::over(x, park).
distance(x, road) ~ normal(10, 2).
distance(x, pilot) ~ normal(100, 20).
"""


@pytest.fixture(scope="session")
def airspace_rules():
    return AIRSPACE_RULES


@pytest.fixture(scope="session")
def airspace_fixture():
    return AIRSPACE_FACTS + AIRSPACE_RULES
