import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from icnnopf.apps import fit_surrogate  # noqa: E402
from icnnopf.dataset import build_dataset, sample_scenarios  # noqa: E402
from icnnopf.icnn import TrainConfig  # noqa: E402
from icnnopf.network import Branch, Bus, NetworkCase, bundled_case  # noqa: E402

TWO_BUS = """\
[header]
s_base_kva = 100
v_base_kv = 12.66
per_unit = true

[buses]
1 slack 0 0 0.95 1.05 0
2 load 1.0 0.5 0.95 1.05 1

[branches]
1 2 0.01 0.01
"""


@pytest.fixture(scope="session")
def case33():
    return bundled_case("ieee33")


@pytest.fixture(scope="session")
def case33_meshed():
    return bundled_case("ieee33_meshed")


@pytest.fixture
def two_bus():
    return NetworkCase((Bus(1, "slack", 0.0, 0.0, 0.95, 1.05), Bus(2, "load", 1.0, 0.5, 0.95, 1.05, True)),
                       (Branch(1, 2, 0.01, 0.01),))


@pytest.fixture(scope="session")
def small_dataset(case33):
    return build_dataset(case33, sample_scenarios(case33, 400, seed=11))


@pytest.fixture(scope="session")
def small_models(small_dataset):
    """(icnn_v, icnn_p, mlp_v, mlp_p) trained briefly on the small dataset."""
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=64, seed=0)
    out = []
    for convex in (True, False):
        for target in "vp":
            out.append(fit_surrogate(small_dataset, target, (16, 16), convex_mode=convex, cfg=cfg, seed=1)[0])
    return tuple(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
