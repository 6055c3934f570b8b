import itertools
import math

import numpy as np
import pytest
import torch


def brute_force_soft_nms(moments, sigma=0.5, score_floor=0.001):
    """Gaussian Soft-NMS by enumerating every selection order.

    An order is consistent when each selected moment holds the maximum
    decayed score among those not yet selected (ties to the lower index).
    Exactly one order is consistent; its prefix above the floor is the result.
    """
    n = len(moments)

    def iou(a, b):
        inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
        return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)

    for perm in itertools.permutations(range(n)):
        ok = True
        final = {}
        for pos, i in enumerate(perm):
            def decayed(j):
                s = moments[j][2]
                for k in perm[:pos]:
                    s *= math.exp(-iou(moments[k], moments[j]) ** 2 / sigma)
                return s

            cur = decayed(i)
            for j in perm[pos + 1:]:
                other = decayed(j)
                if other > cur or (other == cur and j < i):
                    ok = False
                    break
            if not ok:
                break
            final[i] = cur
        if ok:
            out = []
            for i in perm:
                if final[i] < score_floor:
                    break
                out.append((moments[i][0], moments[i][1], final[i]))
            return out
    raise AssertionError("no consistent order")


def naive_recall(preds, gts, k, theta):
    hits = 0
    for key in gts:
        s, e = gts[key]
        found = False
        for p in preds.get(key, [])[:k]:
            inter = max(0.0, min(e, p[1]) - max(s, p[0]))
            union = (e - s) + (p[1] - p[0]) - inter
            if inter / union >= theta:
                found = True
        hits += found
    return 100.0 * hits / len(gts) if gts else 0.0


def central_difference(fn, x, h=1e-6):
    """Numerical gradient of scalar ``fn`` at float64 tensor ``x``."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(fn(x))
        flat[i] = old - h
        down = float(fn(x))
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting ----------------------------------------------------------

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


def pytest_runtest_logreport(report):
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        if "criterion" in props:
            _CRITERIA.append((props["criterion"], report.outcome, props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, detail in _CRITERIA:
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {name}" + (f": {detail}" if detail else ""))


@pytest.fixture
def criterion(request, record_property):
    """Tag the test with its criterion; call the fixture with details to report them."""
    marker = request.node.get_closest_marker("criterion")
    record_property("criterion", marker.args[0])

    def detail(text):
        record_property("detail", text)
        print(f"{marker.args[0]}: {text}")

    return detail
