import itertools
import time

import pytest

from vpkiaas.client import Vehicle
from vpkiaas.domain import Domain, DomainMaterial

_ids = itertools.count()


@pytest.fixture(scope="session")
def material():
    # key generation is the slow part of building a domain, so share it
    return DomainMaterial.generate(["pca-1", "pca-2"])


@pytest.fixture
def domain(material):
    d = Domain.create(tau_p=300, pca_ids=["pca-1", "pca-2"], material=material)
    yield d
    d.close()


@pytest.fixture
def aligned_now():
    """A 3600-aligned instant in the near future so windows are easy to reason about."""
    return (int(time.time()) // 3600 + 1) * 3600


@pytest.fixture
def enroll(domain):
    def make(pca_id="pca-1", **kwargs):
        return Vehicle.enroll(f"veh-{next(_ids)}", domain.ltca, domain.pcas[pca_id], pca_id,
                              domain.material.chain, **kwargs)
    return make


# -- acceptance reporting -------------------------------------------------------------
# Tests marked ``criterion(n, title)`` get one PASS/FAIL line each in the terminal
# summary, including when they crash before reaching their own assertions.

_VERDICTS = []


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the criterion's summary line."""
    def note(text):
        request.node.acceptance_detail = text
        print(text)
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    n, title = marker.args
    verdict = "PASS" if rep.passed else "FAIL"
    note = getattr(item, "acceptance_detail", "")
    if rep.failed and call.excinfo is not None:
        note = (note + "; " if note else "") + call.excinfo.exconly().splitlines()[0][:160]
    _VERDICTS.append((n, f"criterion {n:>2} {verdict}: {title}" + (f" [{note}]" if note else "")))


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
