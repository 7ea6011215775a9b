import numpy as np
import pytest
from hypothesis import settings

from losscape.autodiff import Batch, init_params
from losscape.modelzoo import OptimizerConfig, build_lenet_mini, build_mlp, make_synthetic, train_sgd

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile("ci")


def fd_gradient(f, theta, h=1e-6):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def fd_hessian(grad, theta, h=1e-5):
    """Central differences of an analytic gradient, column by column, then symmetrized."""
    n = theta.size
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        H[:, j] = (grad(theta + e) - grad(theta - e)) / (2 * h)
    return 0.5 * (H + H.T)


@pytest.fixture(scope="session")
def blobs():
    return make_synthetic(3, 6, 60, seed=3)


@pytest.fixture(scope="session")
def tiny_mlp():
    return build_mlp([6, 8, 4, 3], activation="tanh")


@pytest.fixture(scope="session")
def tiny_batch(blobs):
    return Batch(blobs.inputs[:20], blobs.labels[:20])


@pytest.fixture(scope="session")
def image_data():
    return make_synthetic(10, 64, 320, seed=5).reshape((1, 8, 8))


@pytest.fixture(scope="session")
def lenet():
    return build_lenet_mini(8, (4, 8), 10)


@pytest.fixture(scope="session")
def lenet_traj(lenet, image_data):
    cfg = OptimizerConfig(learning_rate=0.05, momentum=0.9, batch_size=32, epochs=1, seed=0)
    return train_sgd(lenet, image_data, cfg, init_seed=0)


@pytest.fixture(scope="session")
def mlp_params(tiny_mlp):
    return init_params(tiny_mlp, 7)


# acceptance criteria report: one line per criterion at the end of the run
_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        num, title = mark.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _CRITERIA[num] = (title, "PASS" if rep.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[num]
        line = f"criterion {num:>2} {verdict}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
