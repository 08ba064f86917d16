import numpy as np
import pytest

from koopman_transfer.dataset import DatasetSpec, generate_splits


@pytest.fixture(scope="session")
def tiny_dataset():
    spec = DatasetSpec(n_train=8, len_train=256, n_val=2, len_val=256, n_test=3, len_test=320, master_seed=7)
    return generate_splits(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arrays, h=1e-6):
    """Central differences of the scalar ``f()`` with respect to every entry of ``arrays``."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = f()
            flat[i] = keep - h
            down = f()
            flat[i] = keep
            gf[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-5):
    # the floor keeps structurally zero gradients (e.g. attention key biases,
    # which softmax shift invariance cancels) from dividing noise by noise
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def check_grads(loss_fn, leaves, tol=1e-4):
    """Backprop ``loss_fn()`` and compare each leaf gradient against central differences.

    Returns the worst tensor-wise relative error.
    """
    for t in leaves:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.array(t.grad if t.grad is not None else np.zeros_like(t.data)) for t in leaves]
    numeric = numeric_grad(lambda: loss_fn().item(), [t.data for t in leaves])
    worst = max(rel_err(a, n) for a, n in zip(analytic, numeric))
    assert worst < tol, worst
    return worst


@pytest.fixture
def gradcheck():
    return check_grads


ACCEPTANCE_LINES = []


def record_criterion(number, name, passed, detail):
    line = f"criterion {number:>2} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
