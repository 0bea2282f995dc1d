import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from farmmind.synthetic import build_demo_world  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

GOLDEN = Path(__file__).parent / "golden"

# patch id -> mock script used for the checked-in golden outputs
GOLDEN_RUNS = {
    "p-enlarge": "supp-a-enlarge",
    "p-temporal": "supp-a-temporal",
    "p-two": "two-region",
}


@pytest.fixture(scope="session")
def demo_world(tmp_path_factory):
    return build_demo_world(tmp_path_factory.mktemp("demo"))


@pytest.fixture(scope="session")
def demo_db(demo_world):
    return demo_world.open_db()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
