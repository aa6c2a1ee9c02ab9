import numpy as np
import pytest

from stabcert.fixtures import bundled_case, bundled_fault, bundled_networks
from stabcert.grid import IBR, Bus, Generator, Line, Load, PowerSystemCase
from stabcert.nn import CLASSIFIER, Network


@pytest.fixture(scope="session")
def case9():
    return bundled_case()


@pytest.fixture(scope="session")
def fault9():
    return bundled_fault()


@pytest.fixture(scope="session")
def nets9():
    return bundled_networks()


def random_net(rng, d, hidden, head=CLASSIFIER, scale=1.0):
    sizes = [d, *hidden, 2 if head == CLASSIFIER else 1]
    Ws = [rng.normal(0, scale / np.sqrt(a), size=(b, a)) for a, b in zip(sizes[:-1], sizes[1:])]
    bs = [rng.normal(0, 0.3, size=b) for b in sizes[1:]]
    return Network.from_arrays(Ws, bs, head=head)


def two_bus_case(r=0.01, x=0.1, pd=80.0, qd=20.0, ibr_forecast=None, s_rated=50.0,
                 cost=(0.01, 10.0, 100.0), curtailment=20.0, rating=9999.0, vlim=(0.95, 1.05),
                 infinite_bus=False):
    """Slack SG at bus 1, load (and optionally an IBR) at bus 2."""
    buses = (Bus(1, "slack", 1.0, *vlim), Bus(2, "PQ", 1.0, *vlim))
    gens = [Generator(1, 0.1, 0.0, 0.2, 0.0, 250.0, -200.0, 200.0, cost, pd)]
    if infinite_bus:
        buses = (Bus(1, "slack", 1.0, *vlim), Bus(2, "PV", 1.0, *vlim))
        gens.append(Generator(2, 1e8, 0.0, 1e-4, -500.0, 500.0, -500.0, 500.0, (0, 0, 0), 0.0))
    ibrs = ()
    if ibr_forecast is not None:
        ibrs = (IBR(2, s_rated, curtailment, ibr_forecast),)
    loads = (Load(2, pd, qd),) if pd or qd else ()
    return PowerSystemCase(buses, (Line(1, 1, 2, r, x, 0.0, rating),), tuple(gens), ibrs, loads,
                           100.0, "two-bus")


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def record_criterion(number, title, passed, detail=""):
    ACCEPTANCE_RESULTS[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
