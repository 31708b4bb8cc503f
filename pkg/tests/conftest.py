import numpy as np
import pytest

from eat.data import TaskSpec, synthesize


def central_difference(f, arrays, eps=1e-3):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array in ``arrays`` (modified in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f()
            a[i] = old - eps
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_error(auto, numeric):
    """max |auto - numeric| / (max |numeric| + 1e-8)."""
    auto = np.asarray(auto, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(auto - numeric)) / (np.max(np.abs(numeric)) + 1e-8))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_task():
    spec = TaskSpec(n_train=64, n_dev=32, min_len=12, max_len=20, seed=3)
    return spec, *synthesize(spec)
