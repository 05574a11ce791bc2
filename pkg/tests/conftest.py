import numpy as np
import pytest


def naive_conv2d(x, k, b, stride=(1, 1), pad=(0, 0)):
    """Nested-loop cross-correlation used as an independent oracle."""
    c, h, w = x.shape
    kk, kc, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad[0], w + 2 * pad[1]))
    xp[:, pad[0] : pad[0] + h, pad[1] : pad[1] + w] = x
    oh = (h + 2 * pad[0] - kh) // stride[0] + 1
    ow = (w + 2 * pad[1] - kw) // stride[1] + 1
    out = np.zeros((kk, oh, ow))
    for o in range(kk):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0 if b is None else b[o]
                for ci in range(c):
                    for p in range(kh):
                        for q in range(kw):
                            acc += xp[ci, i * stride[0] + p, j * stride[1] + q] * k[o, ci, p, q]
                out[o, i, j] = acc
    return out


def central_diff(f, x, step=1e-5):
    """Gradient of scalar f() w.r.t. array x (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def max_rel_err(a, b, floor=1e-10):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance verdict lines

ACCEPTANCE_LINES = {}


class Verdict:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.recorded = False

    def __call__(self, passed, detail):
        self.recorded = True
        line = f"AC{self.number:02d} {'PASS' if passed else 'FAIL'} {self.title}: {detail}"
        ACCEPTANCE_LINES[self.number] = line
        print(line)
        return passed


@pytest.fixture
def verdict(request):
    marker = request.node.get_closest_marker("criterion")
    v = Verdict(*marker.args)
    yield v
    if not v.recorded:
        ACCEPTANCE_LINES[v.number] = f"AC{v.number:02d} FAIL {v.title}: raised before a verdict was reached"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
