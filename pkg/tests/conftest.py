import copy
import json

import pytest
from hypothesis import settings

from pohedge.model import scenario_path, spec_from_dict

settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")


@pytest.fixture(scope="session")
def small_doc():
    return json.loads(scenario_path("two_regime_small").read_text())


@pytest.fixture(scope="session")
def small(small_doc):
    return spec_from_dict(small_doc)


@pytest.fixture(scope="session")
def make_spec(small_doc):
    """Build a variant of the small scenario from nested overrides."""

    def build(payoff=None, prior="keep", **coeffs):
        doc = copy.deepcopy(small_doc)
        doc["coefficients"].update(coeffs)
        if payoff is not None:
            doc["payoff"] = payoff
        if prior != "keep":
            if prior is None:
                doc.pop("prior", None)
            else:
                doc["prior"] = prior
        return spec_from_dict(doc)

    return build


NO_JUMPS = {"type": "constant", "values": [0.0, 0.0]}


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
