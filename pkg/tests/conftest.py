import numpy as np
import pytest
import torch

from gea.fixture import make_fixture


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    """A 6-identity, 16-dimensional fixture shared by the integration tests."""
    root = tmp_path_factory.mktemp("fixture")
    manifests = make_fixture(root, num_identities=6, texts_per_identity=3, dim=16, seed=3)
    return root, manifests


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance criterion as passed or failed."""
    def record(number, title):
        ACCEPTANCE[number] = [title, "FAIL"]
        request.node.user_properties.append(("criterion", number))
        return ACCEPTANCE[number]
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when != "call":
        return
    for key, number in item.user_properties:
        if key == "criterion" and rep.passed:
            ACCEPTANCE[number][1] = "PASS"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status = ACCEPTANCE[number]
        terminalreporter.write_line(f"{status}  [{number:2d}] {title}")
