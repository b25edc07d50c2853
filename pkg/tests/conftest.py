import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from oasis.graph import MarketplaceGraph, TreatmentSet
from oasis.partition import Partition

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# the worked example graph: node ids 1..6, node 0 unused
TOY_EDGES = [(1, 5), (5, 1), (1, 2), (1, 3), (3, 6), (6, 3), (4, 1), (4, 6), (2, 3), (5, 4)]
TOY_BASE = {(5, 1): 0.5, (4, 1): 0.5, (1, 2): 1.0, (1, 3): 0.3, (6, 3): 0.3, (2, 3): 0.4,
            (5, 4): 1.0, (1, 5): 1.0, (3, 6): 0.5, (4, 6): 0.5}
TOY_TREAT = {(5, 1): 0.2, (4, 1): 0.8, (1, 2): 1.0, (1, 3): 0.5, (6, 3): 0.2, (2, 3): 0.3,
             (5, 4): 1.0, (1, 5): 1.0, (3, 6): 0.7, (4, 6): 0.3}


def toy_graph(treat=None):
    treat = TOY_TREAT if treat is None else treat
    src, dst = np.array(TOY_EDGES).T
    g = MarketplaceGraph.from_edges(7, src, dst)
    pb = np.array([TOY_BASE[(a, b)] for a, b in zip(g.src, g.dst)])
    p1 = np.array([treat[(a, b)] for a, b in zip(g.src, g.dst)])
    g = g.with_attributes(p_base=pb, alpha=np.ones(g.n_edges))
    return g, TreatmentSet.from_graph(g, p1)


def toy_partition():
    return Partition(7, ([1], [6]), ([5], [2]), [3], 0.5)


@pytest.fixture
def toy():
    g, t = toy_graph()
    return g, t, toy_partition()


@pytest.fixture(scope="session")
def small_setting():
    from oasis.sim import SimConfig, build_setting
    cfg = SimConfig(n_clusters=4, cluster_size=200, d_ba=6, d_er=2, repeats=2, bootstrap=100)
    return cfg, build_setting(cfg)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
