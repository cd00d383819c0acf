import pytest

from cancelhash.dataset import synth_dataset
from cancelhash.evaluation import extract_features

# standard synthetic fixture shared by the property and acceptance checks
FIXTURE_USERS = 30
FIXTURE_IMPRESSIONS = 4
FIXTURE_SEED = 7


@pytest.fixture(scope="session")
def fixture_dataset():
    return synth_dataset(FIXTURE_USERS, FIXTURE_IMPRESSIONS, seed=FIXTURE_SEED)


@pytest.fixture(scope="session")
def fixture_bank(fixture_dataset):
    return extract_features(fixture_dataset)



def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results.values():
            terminalreporter.write_line(line)
