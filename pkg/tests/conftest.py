import numpy as np
import pytest

from attrprune import dataset as D
from attrprune import graph as G


def central_diff(f, arr, eps=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every element of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = np.argmax(err - bound) if err.size else 0
    assert np.all(err <= bound), (
        f"max violation at {worst}: analytic {analytic.reshape(-1)[worst]} numeric {numeric.reshape(-1)[worst]}")


@pytest.fixture(scope="session")
def small_scenes():
    return D.generate(seed=11, count=8, image_size=16, grid=2)


@pytest.fixture
def depth3_model():
    """Depth-3 plain detector on 16x16 inputs with random (not trained) parameters."""
    return G.build_toy("plain", depth=3, width=4, classes=3, grid=2, image_size=16, seed=5)


def disagreement_model():
    """Small-magnitude conv amplified by a large one, next to a moderate conv whose ReLU is dead.

    L1 ranks the tiny conv ``amp_in`` last; attribution ranks the dead branch
    ``dead`` last (its loss gradient is exactly zero).
    """
    rng = np.random.default_rng(0)
    b = G.GraphBuilder((3, 16, 16), name="disagreement", rng=rng)
    he = lambda cin, cout: rng.normal(0, np.sqrt(2 / (cin * 9)), (cout, cin, 3, 3))  # noqa: E731
    b.conv("amp_in", 4, weight=he(3, 4) * 1e-3, src="input")
    b.relu("amp_in.relu")
    b.conv("amp_out", 4, weight=he(4, 4) * 1e3)
    b.relu("amp_out.relu")
    b.conv("dead", 4, weight=he(3, 4), bias=np.full(4, -1e3), src="input")
    b.relu("dead.relu")
    b.residual_add("merge", "amp_out.relu", "dead.relu")
    for k in range(3):
        b.pool(f"pool{k}")
    b.conv("head", 8, kernel=1)
    b.detect_head("detect", 3)
    return b.build()


# ---------------------------------------------------------------- acceptance reporting
# Tests marked ``@pytest.mark.criterion(n, "title")`` are aggregated into one
# PASS/FAIL line per criterion, printed in the terminal summary.

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "detail": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
        entry["detail"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        e = _CRITERIA[number]
        status = "PASS" if e["ok"] else "FAIL"
        extra = f"  (failed: {', '.join(e['detail'])})" if e["detail"] else ""
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {e['title']}{extra}")


TINY_INI = """\
[model]
paradigm = plain
depth = 3
width = 4
grid = 2
image_size = 16

[data]
train_count = 64
val_count = 40

[train]
epochs = 2
lr_decay_epochs =

[prune]
rate = 0.3
sweep_rates = 0, 0.3, 0.6

[eval]
fps_passes = 5
fps_warmup = 1
"""


@pytest.fixture(scope="session")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(TINY_INI)
    return path


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory, tiny_config):
    from attrprune import harness
    from attrprune.config import load_config
    return harness.cmd_train(load_config(tiny_config), tmp_path_factory.mktemp("tiny-train"))
