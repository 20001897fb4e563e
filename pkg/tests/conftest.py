from dataclasses import replace

import numpy as np
import pytest

from interformer.config import ModelConfig
from interformer.features import GenConfig, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_gen():
    return GenConfig(n_examples=64, dense_count=2, n_users=5, n_categories=6, extra_sparse=(4, 3), n_brands=5,
                     seq_len=6, dim=4)


@pytest.fixture(scope="session")
def small_data(small_gen):
    return generate_synthetic(small_gen, seed=3)


@pytest.fixture(scope="session")
def small_cfg():
    return ModelConfig(dim=4, heads=2, n_cls=2, n_pma=1, n_recent=2, n_sum=2, inter_hidden=8, pffn_hidden=6,
                       fm_rank=3, head_sizes=(8, 4))


@pytest.fixture(scope="session")
def train_data(small_gen):
    """Large enough that both splits hold clicks and non-clicks."""
    return generate_synthetic(replace(small_gen, n_examples=240, test_fraction=0.25), seed=4)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}"
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
