import sys

import numpy as np
import pytest

from gensemrec.catalog import Catalog, Item, assign_sids
from gensemrec.synthworld import generate_world


@pytest.fixture(scope="session")
def small_world():
    return generate_world(seed=3, n_users=600)


@pytest.fixture(scope="session")
def tagged_world():
    return generate_world(seed=4, n_users=400, n_context_tags=3)


def make_catalog(triples, F=4, seed=0):
    """Catalog from ``(item_id, c1, c2, residual)`` tuples with random features."""
    rng = np.random.default_rng(seed)
    return Catalog([Item(i, a, b, r, rng.standard_normal(F)) for i, a, b, r in triples])


@pytest.fixture
def tiny_catalog():
    triples = [(10, 0, 0, 0), (11, 0, 0, 1), (12, 0, 1, 0), (13, 1, 0, 0), (14, 2, 5, 7)]
    cat = make_catalog(triples)
    return cat, assign_sids(list(cat), 3, 8)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
