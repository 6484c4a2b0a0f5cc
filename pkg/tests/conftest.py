import sys
import numpy as np
import pytest

from popdebias.dataset import InteractionLog


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_log(pairs, num_users=None, num_items=None, post=None):
    users = [u for u, _ in pairs]
    items = [i for _, i in pairs]
    return InteractionLog.from_arrays(users, items, post_clicked=post, num_users=num_users, num_items=num_items)


def random_log(rng, n, num_users, num_items, post_rate=0.0):
    users = rng.integers(0, num_users, n)
    items = rng.integers(0, num_items, n)
    ts = rng.integers(0, 1000, n)
    post = (rng.random(n) < post_rate).astype(np.int8)
    return InteractionLog.from_arrays(users, items, ts, None, post, num_users, num_items)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
